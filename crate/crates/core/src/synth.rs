//! Deterministic synthetic driving scenes: static lanes in a global frame, a
//! vehicle driving through them, and a rasterized camera view per frame.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_points_ego, CameraRig, EgoMotion, Point2, Point3, RigidTransform};
use crate::lane::{GroundTruthLane, WorldBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneFamily {
    Straight,
    Arc,
    Polynomial,
    /// Uniform pick among the three above, per sequence.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HillKind {
    Flat,
    /// Cosine bump with random amplitude up to `hill_amplitude` and random phase.
    Bump,
    /// Constant grade, slope up to `max_grade`.
    Grade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub focal: f64,
    pub mount_height: f64,
    pub pitch: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            image_height: 360,
            image_width: 480,
            focal: 300.0,
            mount_height: 1.8,
            pitch: 0.1,
        }
    }
}

impl CameraConfig {
    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::forward_looking(
            (self.image_height, self.image_width),
            self.focal,
            self.mount_height,
            self.pitch,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub family: LaneFamily,
    pub lane_spacing: f64,
    /// Bound on the lateral heading slope dx/dy of the road.
    pub max_heading: f64,
    /// Bound on arc curvature (1/m).
    pub max_curvature: f64,
    pub max_quadratic: f64,
    pub max_cubic: f64,
    pub hill: HillKind,
    pub hill_amplitude: f64,
    pub hill_wavelength: f64,
    pub max_grade: f64,
    /// Optional per-lane length range in meters; lanes span the whole road when unset.
    pub lane_length: Option<(f64, f64)>,
    /// Forward motion per frame (m).
    pub ego_speed: f64,
    /// Bound on the path curvature the vehicle drives; yaw per frame = speed × curvature.
    pub ego_max_curvature: f64,
    pub stroke_width: f64,
    pub background_noise: f64,
    /// Fraction of lanes drawn yellow (category 2) instead of white (category 1).
    pub yellow_fraction: f64,
    pub world: WorldBox,
    pub camera: CameraConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_lanes: 2,
            max_lanes: 4,
            family: LaneFamily::Mixed,
            lane_spacing: 3.6,
            max_heading: 0.03,
            max_curvature: 0.002,
            max_quadratic: 4e-4,
            max_cubic: 1.5e-6,
            hill: HillKind::Bump,
            hill_amplitude: 1.5,
            hill_wavelength: 120.0,
            max_grade: 0.02,
            lane_length: None,
            ego_speed: 1.0,
            ego_max_curvature: 5e-4,
            stroke_width: 3.0,
            background_noise: 0.08,
            yellow_fraction: 0.25,
            world: WorldBox::default(),
            camera: CameraConfig::default(),
            seed: 0,
        }
    }
}

/// 8-bit interleaved raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + ch]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub sequence_id: String,
    pub index: usize,
    /// RGB image.
    pub image: Raster,
    /// Single-channel 0/1 lane mask.
    pub seg_mask: Raster,
    pub lanes: Vec<GroundTruthLane>,
    pub rig: CameraRig,
    /// Maps the previous frame's ground coordinates into this frame's.
    pub ego_motion_from_prev: EgoMotion,
}

/// A lane as a dense polyline in the global (frame-0) ground frame.
#[derive(Debug, Clone)]
struct WorldLane {
    points: Vec<Point3>,
    category: i64,
    track_id: i64,
}

const DENSE_STEP: f64 = 1.0;
const CATEGORY_WHITE: i64 = 1;
const CATEGORY_YELLOW: i64 = 2;

pub fn sequence_rng(seed: u64, sequence: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sequence);
    rng
}

fn sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..=bound)
    } else {
        0.0
    }
}

fn world_lanes(cfg: &SceneConfig, rng: &mut ChaCha8Rng, far_y: f64) -> Result<Vec<WorldLane>> {
    if cfg.min_lanes == 0 || cfg.max_lanes < cfg.min_lanes {
        return Err(Error::Config(format!(
            "lane count range [{}, {}] is empty or zero",
            cfg.min_lanes, cfg.max_lanes
        )));
    }
    let n = rng.gen_range(cfg.min_lanes..=cfg.max_lanes);
    let family = match cfg.family {
        LaneFamily::Mixed => [LaneFamily::Straight, LaneFamily::Arc, LaneFamily::Polynomial][rng.gen_range(0..3)],
        f => f,
    };
    let heading = sym(rng, cfg.max_heading);
    let shift = sym(rng, 0.5 * cfg.lane_spacing);
    let curvature = sym(rng, cfg.max_curvature);
    let c2 = sym(rng, cfg.max_quadratic);
    let c3 = sym(rng, cfg.max_cubic);
    let (amp, phase) = (
        rng.gen_range(0.0..=cfg.hill_amplitude.max(0.0)),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let grade = sym(rng, cfg.max_grade);
    let z_of = |y: f64| match cfg.hill {
        HillKind::Flat => 0.0,
        HillKind::Grade => grade * y,
        HillKind::Bump => {
            let w = std::f64::consts::TAU / cfg.hill_wavelength;
            0.5 * amp * ((phase).cos() - (w * y + phase).cos())
        }
    };
    let y0 = cfg.world.y.0 - 10.0;
    let steps = ((far_y - y0) / DENSE_STEP).ceil() as usize;
    let mut lanes = Vec::with_capacity(n);
    for i in 0..n {
        let offset = (i as f64 - (n as f64 - 1.0) / 2.0) * cfg.lane_spacing + shift;
        let (ys, ye) = match cfg.lane_length {
            Some((lo, hi)) => {
                let len = rng.gen_range(lo..=hi);
                let start = rng.gen_range(cfg.world.y.0..=(cfg.world.y.1 - len).max(cfg.world.y.0));
                (start, start + len)
            }
            None => (f64::NEG_INFINITY, f64::INFINITY),
        };
        let category = if rng.gen_bool(cfg.yellow_fraction.clamp(0.0, 1.0)) {
            CATEGORY_YELLOW
        } else {
            CATEGORY_WHITE
        };
        let mut points = Vec::with_capacity(steps + 1);
        for s in 0..=steps {
            let y = y0 + s as f64 * DENSE_STEP;
            if y < ys || y > ye {
                continue;
            }
            let x = match family {
                LaneFamily::Straight => offset + heading * y,
                LaneFamily::Arc => {
                    if curvature.abs() < 1e-9 {
                        offset + heading * y
                    } else {
                        // Concentric circles around (1/κ, 0).
                        let rc = 1.0 / curvature;
                        let r = (rc - offset).abs();
                        rc - rc.signum() * (r * r - y * y).max(0.0).sqrt() + heading * y
                    }
                }
                LaneFamily::Polynomial | LaneFamily::Mixed => offset + heading * y + c2 * y * y + c3 * y * y * y,
            };
            points.push([x, y, z_of(y)]);
        }
        lanes.push(WorldLane {
            points,
            category,
            track_id: i as i64,
        });
    }
    Ok(lanes)
}

/// Longest contiguous run of points inside the box.
fn visible_run(points: &[Point3], world: &WorldBox) -> Vec<Point3> {
    let mut best: &[Point3] = &[];
    let mut start = None;
    for i in 0..=points.len() {
        let inside = i < points.len() && world.contains(points[i]);
        match (inside, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s > best.len() {
                    best = &points[s..i];
                }
                start = None;
            }
            _ => {}
        }
    }
    best.to_vec()
}

/// Frame-local ground truth of the world lanes seen from `pose` (vehicle-to-global).
fn frame_lanes(lanes: &[WorldLane], pose_inv: &EgoMotion, world: &WorldBox) -> Vec<GroundTruthLane> {
    lanes
        .iter()
        .filter_map(|l| {
            let local = transform_points_ego(&l.points, pose_inv);
            let run = visible_run(&local, world);
            GroundTruthLane::from_points(run, Some(l.category), Some(l.track_id)).ok()
        })
        .collect()
}

/// Generates `length` consecutive frames of sequence `sequence` under `cfg`.
pub fn generate_sequence(cfg: &SceneConfig, sequence: u64, length: usize) -> Result<Vec<FrameSample>> {
    if length == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let rig = cfg.camera.rig()?;
    let mut rng = sequence_rng(cfg.seed, sequence);
    let far_y = cfg.world.y.1 + cfg.ego_speed.abs() * length as f64 + 20.0;
    let lanes = world_lanes(cfg, &mut rng, far_y)?;
    let ego_curvature = sym(&mut rng, cfg.ego_max_curvature);
    let sequence_id = format!("seq_{sequence:04}");

    let mut pose = RigidTransform::identity();
    let mut frames = Vec::with_capacity(length);
    for index in 0..length {
        let motion = if index == 0 {
            EgoMotion::identity()
        } else {
            let step = RigidTransform::from_yaw_translation(cfg.ego_speed * ego_curvature, [0.0, cfg.ego_speed, 0.0]);
            // pose_t = pose_{t-1} · step, so points move by step⁻¹.
            pose = step.then(&pose);
            EgoMotion::from_transform(step.inverse())
        };
        let pose_inv = EgoMotion::from_transform(pose.inverse());
        let gt = frame_lanes(&lanes, &pose_inv, &cfg.world);
        if gt.is_empty() {
            return Err(Error::NoVisibleLanes { frame: index });
        }
        let (image, seg_mask) = render_frame(&gt, &rig, cfg.stroke_width, cfg.background_noise, &mut rng);
        frames.push(FrameSample {
            sequence_id: sequence_id.clone(),
            index,
            image,
            seg_mask,
            lanes: gt,
            rig: rig.clone(),
            ego_motion_from_prev: motion,
        });
    }
    Ok(frames)
}

/// Projected 2D polyline pieces of a lane; a piece breaks wherever a point is behind the camera.
pub fn projected_polylines(lane: &GroundTruthLane, rig: &CameraRig) -> Vec<Vec<Point2>> {
    let mut pieces = Vec::new();
    let mut cur: Vec<Point2> = Vec::new();
    for p in &lane.points {
        let c = rig.to_camera(*p);
        if c[2] > crate::geometry::MIN_DEPTH {
            cur.push(rig.camera_to_pixel(c));
        } else if !cur.is_empty() {
            pieces.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces
}

/// Euclidean distance from `p` to segment `ab`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Per-pixel distance to the nearest projected segment of each lane, visited per segment bounding box.
fn for_each_stroke_pixel(
    pieces: &[Vec<Point2>],
    height: usize,
    width: usize,
    reach: f64,
    mut f: impl FnMut(usize, usize, f64),
) {
    for piece in pieces {
        let segs: Vec<(Point2, Point2)> = if piece.len() == 1 {
            vec![(piece[0], piece[0])]
        } else {
            piece.windows(2).map(|w| (w[0], w[1])).collect()
        };
        for (a, b) in segs {
            let c0 = (a[0].min(b[0]) - reach).floor().max(0.0);
            let c1 = (a[0].max(b[0]) + reach).ceil().min(width as f64 - 1.0);
            let r0 = (a[1].min(b[1]) - reach).floor().max(0.0);
            let r1 = (a[1].max(b[1]) + reach).ceil().min(height as f64 - 1.0);
            if c0 > c1 || r0 > r1 {
                continue;
            }
            for r in r0 as usize..=r1 as usize {
                for c in c0 as usize..=c1 as usize {
                    let d = point_segment_distance([c as f64, r as f64], a, b);
                    if d <= reach {
                        f(r, c, d);
                    }
                }
            }
        }
    }
}

/// Binary lane mask: a pixel is set iff its center is within `stroke_width / 2` of a projected lane.
pub fn lane_mask(lanes: &[GroundTruthLane], rig: &CameraRig, stroke_width: f64) -> Raster {
    let (h, w) = rig.image_size;
    let mut mask = Raster::zeros(h, w, 1);
    for lane in lanes {
        let pieces = projected_polylines(lane, rig);
        for_each_stroke_pixel(&pieces, h, w, stroke_width / 2.0, |r, c, _| mask.data[r * w + c] = 1);
    }
    mask
}

fn lane_color(category: Option<i64>) -> [f64; 3] {
    match category {
        Some(CATEGORY_YELLOW) => [0.95, 0.8, 0.15],
        _ => [0.97, 0.97, 0.97],
    }
}

/// Draws the lanes over a textured road/sky background and returns `(image, mask)`.
pub fn rasterize_frame(
    lanes: &[GroundTruthLane],
    rig: &CameraRig,
    stroke_width: f64,
    background_noise: f64,
    rng: &mut impl Rng,
) -> (Raster, Raster) {
    render_frame(lanes, rig, stroke_width, background_noise, rng)
}

fn render_frame(
    lanes: &[GroundTruthLane],
    rig: &CameraRig,
    stroke_width: f64,
    background_noise: f64,
    rng: &mut impl Rng,
) -> (Raster, Raster) {
    let (h, w) = rig.image_size;
    let mut img = vec![0.0f64; h * w * 3];
    let k_inv = rig.intrinsics.try_inverse().expect("intrinsics are invertible");
    let r = rig.ground_to_camera.matrix().fixed_view::<3, 3>(0, 0).into_owned();
    for row in 0..h {
        let ray = k_inv * nalgebra::Vector3::new(rig.cx(), row as f64, 1.0);
        let ground_dir = r.transpose() * ray;
        let base = if ground_dir[2] < 0.0 {
            [0.35, 0.35, 0.37]
        } else {
            [0.62, 0.72, 0.88]
        };
        for col in 0..w {
            for ch in 0..3 {
                let n = if background_noise > 0.0 {
                    rng.gen_range(-background_noise..=background_noise)
                } else {
                    0.0
                };
                img[(row * w + col) * 3 + ch] = base[ch] + n;
            }
        }
    }
    let half = stroke_width / 2.0;
    for lane in lanes {
        let color = lane_color(lane.category);
        let pieces = projected_polylines(lane, rig);
        let mut cov = std::collections::HashMap::<usize, f64>::new();
        for_each_stroke_pixel(&pieces, h, w, half + 0.5, |r, c, d| {
            let a = (half + 0.5 - d).clamp(0.0, 1.0);
            let e = cov.entry(r * w + c).or_insert(0.0);
            *e = e.max(a);
        });
        for (idx, a) in cov {
            for ch in 0..3 {
                let v = &mut img[idx * 3 + ch];
                *v = a * color[ch] + (1.0 - a) * *v;
            }
        }
    }
    let image = Raster {
        height: h,
        width: w,
        channels: 3,
        data: img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    };
    (image, lane_mask(lanes, rig, stroke_width))
}
