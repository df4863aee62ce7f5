//! Ground/camera coordinate frames, rigid transforms, pinhole projection and
//! feature-map sampling.
//!
//! Ground frame: x to the right, y forward, z up (meters). Camera frame uses
//! the optics convention: x right, y down, z along the optical axis.

use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];
pub type Point2 = [f64; 2];

const RIGID_TOL: f64 = 1e-9;

/// A validated 4x4 rigid transform (rotation block orthonormal, det +1, last row `0 0 0 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform(Matrix4<f64>);

impl RigidTransform {
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonRigid("non-finite entry".into()));
        }
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err >= RIGID_TOL {
            return Err(Error::NonRigid(format!(
                "rotation block not orthonormal (max |RᵀR - I| = {err:.3e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() >= RIGID_TOL {
            return Err(Error::NonRigid(format!("rotation determinant {det}")));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::NonRigid(format!("bottom row {bottom:?}")));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let m = Matrix4::new(
            c, -s, 0.0, t[0],
            s,  c, 0.0, t[1],
            0.0, 0.0, 1.0, t[2],
            0.0, 0.0, 0.0, 1.0,
        );
        Self(m)
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        Self::new(m)
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.0[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    /// Exact inverse using the rigid structure (Rᵀ, -Rᵀt).
    pub fn inverse(&self) -> Self {
        let r = self.0.fixed_view::<3, 3>(0, 0).transpose();
        let t = self.0.fixed_view::<3, 1>(0, 3).into_owned();
        let ti = -(r * t);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&ti);
        Self(m)
    }

    /// `self` followed by `next`: the matrix product `next · self`.
    pub fn then(&self, next: &RigidTransform) -> Self {
        let mut m = next.0 * self.0;
        m[(3, 0)] = 0.0;
        m[(3, 1)] = 0.0;
        m[(3, 2)] = 0.0;
        m[(3, 3)] = 1.0;
        Self(m)
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let m = &self.0;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }

    pub fn apply_homogeneous(&self, p: Vector4<f64>) -> Vector4<f64> {
        self.0 * p
    }
}

/// Rigid transform from the ground frame at an earlier time to the current ground frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoMotion {
    pub transform: RigidTransform,
}

impl EgoMotion {
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        Ok(Self {
            transform: RigidTransform::new(m)?,
        })
    }

    pub fn identity() -> Self {
        Self {
            transform: RigidTransform::identity(),
        }
    }

    pub fn from_transform(transform: RigidTransform) -> Self {
        Self { transform }
    }

    /// Motion of `self` followed by `next`.
    pub fn then(&self, next: &EgoMotion) -> Self {
        Self {
            transform: self.transform.then(&next.transform),
        }
    }

    pub fn inverse(&self) -> Self {
        Self {
            transform: self.transform.inverse(),
        }
    }
}

/// Maps points expressed in the ground frame of frame `t-i` into the ground frame of frame `t`.
pub fn transform_points_ego(points: &[Point3], motion: &EgoMotion) -> Vec<Point3> {
    points.iter().map(|&p| motion.transform.apply(p)).collect()
}

/// Intrinsics, extrinsics and raster size of a rectified pinhole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub intrinsics: Matrix3<f64>,
    pub ground_to_camera: RigidTransform,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
}

impl CameraRig {
    pub fn new(intrinsics: Matrix3<f64>, ground_to_camera: RigidTransform, image_size: (usize, usize)) -> Result<Self> {
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidRig(format!(
                "focal entries must be positive (fx={}, fy={})",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidRig(
                "intrinsics must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::InvalidRig("image size must be non-zero".into()));
        }
        Ok(Self {
            intrinsics,
            ground_to_camera,
            image_size,
        })
    }

    /// Forward-looking camera mounted `height` meters above the ground origin and
    /// pitched down by `pitch` radians, principal point at the image center.
    pub fn forward_looking(image_size: (usize, usize), focal: f64, height: f64, pitch: f64) -> Result<Self> {
        let (h, w) = image_size;
        let k = Matrix3::new(
            focal,
            0.0,
            (w as f64 - 1.0) / 2.0,
            0.0,
            focal,
            (h as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        // Axis swap ground (x right, y fwd, z up) -> camera (x right, y down, z fwd),
        // then a rotation about the camera x axis for the downward pitch.
        let swap = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let (s, c) = pitch.sin_cos();
        let pitch_rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        let r = pitch_rot * swap;
        let center = nalgebra::Vector3::new(0.0, 0.0, height);
        let t = -(r * center);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(k, RigidTransform::new(m)?, image_size)
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn to_camera(&self, p: Point3) -> Point3 {
        self.ground_to_camera.apply(p)
    }

    /// Pixel coordinates of a camera-frame point (no validity check).
    pub fn camera_to_pixel(&self, c: Point3) -> Point2 {
        let k = &self.intrinsics;
        let x = c[0] / c[2];
        let y = c[1] / c[2];
        [k[(0, 0)] * x + k[(0, 1)] * y + k[(0, 2)], k[(1, 1)] * y + k[(1, 2)]]
    }

    pub fn in_image(&self, uv: Point2) -> bool {
        let (h, w) = self.image_size;
        uv[0] >= 0.0 && uv[0] <= (w - 1) as f64 && uv[1] >= 0.0 && uv[1] <= (h - 1) as f64
    }

    pub fn extent(&self) -> LevelExtent {
        LevelExtent {
            height: self.image_size.0 as f64,
            width: self.image_size.1 as f64,
        }
    }
}

/// Projected pixel locations plus the per-point validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub points2d: Vec<Point2>,
    pub validity: Vec<bool>,
    /// Camera-frame depth of each point.
    pub depth: Vec<f64>,
    pub epsilon: f64,
}

impl ProjectionResult {
    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|v| **v).count()
    }
}

/// Minimum camera depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;
pub const PROJECTION_EPS: f64 = 1e-6;

/// Pinhole projection. Points behind the camera or outside the raster get a 0 flag
/// (their pixel coordinates are still reported when the depth is non-zero).
pub fn project_to_image(points3d: &[Point3], rig: &CameraRig) -> ProjectionResult {
    let mut points2d = Vec::with_capacity(points3d.len());
    let mut validity = Vec::with_capacity(points3d.len());
    let mut depth = Vec::with_capacity(points3d.len());
    for &p in points3d {
        let c = rig.to_camera(p);
        depth.push(c[2]);
        if c[2] > MIN_DEPTH {
            let uv = rig.camera_to_pixel(c);
            validity.push(rig.in_image(uv));
            points2d.push(uv);
        } else {
            validity.push(false);
            points2d.push([f64::NAN, f64::NAN]);
        }
    }
    ProjectionResult {
        points2d,
        validity,
        depth,
        epsilon: PROJECTION_EPS,
    }
}

/// Size of a raster or feature level, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelExtent {
    pub height: f64,
    pub width: f64,
}

impl LevelExtent {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height: height as f64,
            width: width as f64,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 1.0;
        if ok(self.height) && ok(self.width) {
            Ok(())
        } else {
            Err(Error::InvalidLevel {
                height: self.height,
                width: self.width,
            })
        }
    }
}

fn corner_scale(n: f64) -> f64 {
    if n > 1.0 {
        n - 1.0
    } else {
        0.0
    }
}

/// Corner-aligned normalization: cell 0 maps to 0, the last cell center to 1.
pub fn normalize_coords(p: Point2, extent: LevelExtent) -> Result<Point2> {
    extent.check()?;
    let sx = corner_scale(extent.width);
    let sy = corner_scale(extent.height);
    Ok([
        if sx > 0.0 { p[0] / sx } else { 0.0 },
        if sy > 0.0 { p[1] / sy } else { 0.0 },
    ])
}

pub fn denormalize_coords(p: Point2, extent: LevelExtent) -> Result<Point2> {
    extent.check()?;
    Ok([p[0] * corner_scale(extent.width), p[1] * corner_scale(extent.height)])
}

/// Dense H×W×D grid stored row-major with the feature dimension innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * dim == 0 {
            return Err(Error::Shape("feature map must be non-empty".into()));
        }
        if data.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "feature map data has {} values, expected {}",
                data.len(),
                height * width * dim
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn extent(&self) -> LevelExtent {
        LevelExtent::new(self.height, self.width)
    }
}

/// The four interpolation taps of a bilinear lookup: (flat cell index, weight).
/// `None` when the query lies outside `[0, W-1] × [0, H-1]`.
pub(crate) fn bilinear_taps(height: usize, width: usize, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
    let wmax = (width - 1) as f64;
    let hmax = (height - 1) as f64;
    if !(u >= 0.0 && u <= wmax && v >= 0.0 && v <= hmax) {
        return None;
    }
    let x0 = (u.floor() as usize).min(width - 1);
    let y0 = (v.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

/// Bilinear interpolation at `(u, v)` = (column, row); zero vector outside the grid.
pub fn bilinear_sample(map: &FeatureMap, point2d: Point2) -> Vec<f64> {
    let mut out = vec![0.0; map.dim];
    if let Some(taps) = bilinear_taps(map.height, map.width, point2d[0], point2d[1]) {
        for (cell, w) in taps {
            if w == 0.0 {
                continue;
            }
            let src = &map.data[cell * map.dim..(cell + 1) * map.dim];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    out
}
