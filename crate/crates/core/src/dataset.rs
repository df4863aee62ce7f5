//! On-disk dataset: one annotation JSON per sequence, PNG images and masks,
//! plus a manifest.
//!
//! ```text
//! <root>/manifest.json
//! <root>/sequences/seq_0000.json
//! <root>/images/seq_0000/000000.png
//! <root>/masks/seq_0000/000000.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, EgoMotion, Point3, RigidTransform};
use crate::lane::GroundTruthLane;
use crate::synth::{FrameSample, Raster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<i64>,
    pub points: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameAnnotation {
    pub index: usize,
    pub image_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    /// `[height, width]`; taken from the image file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<[usize; 2]>,
    pub intrinsics: [[f64; 3]; 3],
    pub ground_to_camera: [[f64; 4]; 4],
    pub ego_motion_from_prev: [[f64; 4]; 4],
    pub lanes: Vec<LaneAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceAnnotation {
    pub sequence_id: String,
    pub frames: Vec<FrameAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub sequences: Vec<String>,
    pub config: serde_json::Value,
}

fn schema_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

impl FrameAnnotation {
    pub fn gt_lanes(&self) -> Result<Vec<GroundTruthLane>> {
        self.lanes
            .iter()
            .enumerate()
            .map(|(i, l)| {
                GroundTruthLane::from_points(l.points.clone(), l.category, l.track_id).map_err(|e| match e {
                    Error::Schema { message, .. } => {
                        schema_err(format!("frames[{}].lanes[{i}].points", self.index), message)
                    }
                    other => other,
                })
            })
            .collect()
    }

    pub fn ego_motion(&self) -> Result<EgoMotion> {
        RigidTransform::from_rows(&self.ego_motion_from_prev)
            .map(EgoMotion::from_transform)
            .map_err(|e| schema_err(format!("frames[{}].ego_motion_from_prev", self.index), e.to_string()))
    }

    /// Camera rig with the given raster size (used when `image_size` is absent).
    pub fn rig(&self, fallback_size: Option<(usize, usize)>) -> Result<CameraRig> {
        let size = self
            .image_size
            .map(|[h, w]| (h, w))
            .or(fallback_size)
            .ok_or_else(|| schema_err(format!("frames[{}].image_size", self.index), "unknown image size"))?;
        let k = &self.intrinsics;
        let k = Matrix3::new(
            k[0][0], k[0][1], k[0][2], k[1][0], k[1][1], k[1][2], k[2][0], k[2][1], k[2][2],
        );
        let ext = RigidTransform::from_rows(&self.ground_to_camera)
            .map_err(|e| schema_err(format!("frames[{}].ground_to_camera", self.index), e.to_string()))?;
        CameraRig::new(k, ext, size)
            .map_err(|e| schema_err(format!("frames[{}].intrinsics", self.index), e.to_string()))
    }
}

/// Parses a sequence annotation, reporting the JSON path of any schema violation.
pub fn parse_annotations(json: &str) -> Result<SequenceAnnotation> {
    let de = &mut serde_json::Deserializer::from_str(json);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn load_annotations(path: &Path) -> Result<SequenceAnnotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Schema { path: p, message } => Error::Schema {
            path: format!("{}: {p}", path.display()),
            message,
        },
        other => other,
    })
}

fn frame_file(kind: &str, seq: &str, index: usize) -> String {
    format!("{kind}/{seq}/{index:06}.png")
}

pub fn annotate(frame: &FrameSample) -> FrameAnnotation {
    let k = &frame.rig.intrinsics;
    FrameAnnotation {
        index: frame.index,
        image_file: frame_file("images", &frame.sequence_id, frame.index),
        mask_file: Some(frame_file("masks", &frame.sequence_id, frame.index)),
        image_size: Some([frame.rig.image_size.0, frame.rig.image_size.1]),
        intrinsics: [
            [k[(0, 0)], k[(0, 1)], k[(0, 2)]],
            [k[(1, 0)], k[(1, 1)], k[(1, 2)]],
            [k[(2, 0)], k[(2, 1)], k[(2, 2)]],
        ],
        ground_to_camera: frame.rig.ground_to_camera.to_rows(),
        ego_motion_from_prev: frame.ego_motion_from_prev.transform.to_rows(),
        lanes: frame
            .lanes
            .iter()
            .map(|l| LaneAnnotation {
                track_id: l.track_id,
                category: l.category,
                points: l.points.clone(),
            })
            .collect(),
    }
}

fn write_png(path: &Path, raster: &Raster) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let color = match raster.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
    };
    image::save_buffer(path, &raster.data, raster.width as u32, raster.height as u32, color).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

fn read_png(path: &Path, channels: usize) -> Result<Raster> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match channels {
        1 => img.into_luma8().into_raw(),
        _ => img.into_rgb8().into_raw(),
    };
    Ok(Raster {
        height: h,
        width: w,
        channels,
        data,
    })
}

/// Writes sequences (grouped by `sequence_id`, in order of first appearance) under `root`.
pub fn save_dataset(samples: &[FrameSample], root: &Path, seed: u64, config: serde_json::Value) -> Result<Manifest> {
    let mut order: Vec<String> = Vec::new();
    for s in samples {
        if !order.contains(&s.sequence_id) {
            order.push(s.sequence_id.clone());
        }
    }
    let seq_dir = root.join("sequences");
    fs::create_dir_all(&seq_dir).map_err(|e| Error::io(format!("creating {}", seq_dir.display()), e))?;
    let mut files = Vec::new();
    for seq in &order {
        let frames: Vec<&FrameSample> = samples.iter().filter(|s| &s.sequence_id == seq).collect();
        let ann = SequenceAnnotation {
            sequence_id: seq.clone(),
            frames: frames.iter().map(|f| annotate(f)).collect(),
        };
        for (f, a) in frames.iter().zip(&ann.frames) {
            write_png(&root.join(&a.image_file), &f.image)?;
            if let Some(m) = &a.mask_file {
                write_png(&root.join(m), &f.seg_mask)?;
            }
        }
        let name = format!("sequences/{seq}.json");
        let text = serde_json::to_string_pretty(&ann)?;
        let path = root.join(&name);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        files.push(name);
    }
    let manifest = Manifest {
        seed,
        sequences: files,
        config,
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// Sequence annotation files under `root`, sorted by name.
pub fn sequence_files(root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join("sequences");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads one sequence with its rasters.
pub fn load_sequence(root: &Path, file: &Path) -> Result<Vec<FrameSample>> {
    let ann = load_annotations(file)?;
    let mut out = Vec::with_capacity(ann.frames.len());
    for f in &ann.frames {
        let image = read_png(&root.join(&f.image_file), 3)?;
        let seg_mask = match &f.mask_file {
            Some(m) => read_png(&root.join(m), 1)?,
            None => Raster::zeros(image.height, image.width, 1),
        };
        let rig = f.rig(Some((image.height, image.width)))?;
        if rig.image_size != (image.height, image.width) {
            return Err(schema_err(
                format!("frames[{}].image_size", f.index),
                format!(
                    "annotated {:?} but image is {}x{}",
                    rig.image_size, image.height, image.width
                ),
            ));
        }
        out.push(FrameSample {
            sequence_id: ann.sequence_id.clone(),
            index: f.index,
            image,
            seg_mask,
            lanes: f.gt_lanes()?,
            rig,
            ego_motion_from_prev: f.ego_motion()?,
        });
    }
    Ok(out)
}

/// Loads every sequence under `root`.
pub fn load_dataset(root: &Path) -> Result<Vec<Vec<FrameSample>>> {
    let files = sequence_files(root)?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no sequences under {}", root.display())));
    }
    files.iter().map(|f| load_sequence(root, f)).collect()
}
