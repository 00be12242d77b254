//! Multi-view dataset format.
//!
//! ```text
//! <root>/manifest.json
//! <root>/frame_0000/view_00.rgb.png    8-bit RGB
//! <root>/frame_0000/view_00.mask.png   8-bit gray, 0 or 255
//! <root>/frame_0000/view_00.depth.png  16-bit gray, camera z-depth in mm, 0 = no surface
//! ```
//!
//! The manifest stores the schema version, image size, cameras (pinhole,
//! world-to-camera, +z forward, x right, y down), the skeleton and one pose
//! per frame.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{self, quantize_depth_mm, Rgb8};
use crate::skeleton::{Skeleton, SkeletonPose};
use crate::synth::{animate, build_actor, render_ground_truth, GroundTruth, Motion, RigSpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// The images of one camera at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImages {
    pub rgb: Rgb8,
    /// 0 or 1 per pixel.
    pub mask: Vec<u8>,
    /// Millimeters; `None` when the dataset carries no depth.
    pub depth_mm: Option<Vec<u16>>,
}

impl ViewImages {
    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        Self {
            rgb: Rgb8::from_unit(gt.width, gt.height, &gt.rgb),
            mask: gt.mask.iter().map(|&m| m as u8).collect(),
            depth_mm: Some(gt.depth.iter().map(|&d| quantize_depth_mm(d)).collect()),
        }
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Depth in meters at pixel `i`, if any surface was recorded there.
    pub fn depth_at(&self, i: usize) -> Option<f64> {
        self.depth_mm.as_ref().and_then(|d| image::depth_mm_to_meters(d[i]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFrame {
    pub index: usize,
    pub pose: SkeletonPose,
    pub views: Vec<ViewImages>,
}

/// Provenance of synthetic subjects, enough to regenerate ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub actor_seed: u64,
    pub motion: Motion,
    pub period: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<Camera>,
    pub skeleton: Skeleton,
    pub subject: Option<SubjectRecord>,
    pub frames: Vec<DatasetFrame>,
}

impl Dataset {
    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn has_depth(&self) -> bool {
        self.frames.iter().all(|f| f.views.iter().all(|v| v.depth_mm.is_some()))
    }

    /// Keeps only the listed cameras, in the given order.
    pub fn select_views(&self, views: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = views.iter().find(|&&v| v >= self.num_views()) {
            return Err(Error::InvalidInput(format!("view {bad} out of range")));
        }
        Ok(Dataset {
            width: self.width,
            height: self.height,
            cameras: views.iter().map(|&v| self.cameras[v].clone()).collect(),
            skeleton: self.skeleton.clone(),
            subject: self.subject.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| DatasetFrame {
                    index: f.index,
                    pose: f.pose.clone(),
                    views: views.iter().map(|&v| f.views[v].clone()).collect(),
                })
                .collect(),
        })
    }

    /// Keeps only the listed frame positions.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = frames.iter().find(|&&f| f >= self.frames.len()) {
            return Err(Error::InvalidInput(format!("frame {bad} out of range")));
        }
        Ok(Dataset {
            frames: frames.iter().map(|&f| self.frames[f].clone()).collect(),
            ..self.clone()
        })
    }
}

/// Parameters of a synthetic capture.
#[derive(Clone, Debug, PartialEq)]
pub struct DatagenSpec {
    pub views: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
    pub motion: Motion,
    /// Frames per motion cycle.
    pub period: usize,
    /// Frame index of the first frame.
    pub first_frame: usize,
    /// Frame index increment between stored frames.
    pub frame_stride: usize,
    /// Azimuth of camera 0, radians.
    pub phase: f64,
}

impl DatagenSpec {
    pub fn new(views: usize, frames: usize, size: usize, seed: u64, motion: Motion) -> Self {
        Self {
            views,
            frames,
            size,
            seed,
            motion,
            period: 40,
            first_frame: 0,
            frame_stride: 1,
            phase: 0.0,
        }
    }

    pub fn rig(&self) -> RigSpec {
        RigSpec {
            phase: self.phase,
            ..RigSpec::ring(self.views, self.size)
        }
    }
}

pub fn generate_dataset(spec: &DatagenSpec) -> Result<Dataset> {
    if spec.size == 0 || spec.frames == 0 {
        return Err(Error::InvalidInput("size and frame count must be positive".into()));
    }
    let actor = build_actor(spec.seed);
    let rig = spec.rig().build()?;
    let mut frames = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let index = spec.first_frame + f * spec.frame_stride;
        let pose = animate(&actor, index, spec.motion, spec.period)?;
        let views = rig
            .cameras
            .iter()
            .map(|cam| render_ground_truth(&actor, &pose, cam).map(|gt| ViewImages::from_ground_truth(&gt)))
            .collect::<Result<Vec<_>>>()?;
        frames.push(DatasetFrame { index, pose, views });
    }
    Ok(Dataset {
        width: spec.size,
        height: spec.size,
        cameras: rig.cameras,
        skeleton: actor.skeleton,
        subject: Some(SubjectRecord {
            actor_seed: spec.seed,
            motion: spec.motion,
            period: spec.period,
        }),
        frames,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    width: usize,
    height: usize,
    cameras: Vec<Camera>,
    skeleton: Skeleton,
    #[serde(default)]
    subject: Option<SubjectRecord>,
    #[serde(default = "default_true")]
    has_depth: bool,
    frames: Vec<FrameRecord>,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    index: usize,
    dir: String,
    pose: SkeletonPose,
}

pub fn frame_dir_name(index: usize) -> String {
    format!("frame_{index:04}")
}

pub fn view_file(dir: &Path, view: usize, kind: &str) -> PathBuf {
    dir.join(format!("view_{view:02}.{kind}.png"))
}

pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let has_depth = ds.has_depth();
    let mut records = Vec::with_capacity(ds.frames.len());
    for frame in &ds.frames {
        let name = frame_dir_name(frame.index);
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if frame.views.len() != ds.cameras.len() {
            return Err(Error::InvalidInput(format!(
                "frame {} has {} views for {} cameras",
                frame.index,
                frame.views.len(),
                ds.cameras.len()
            )));
        }
        for (v, img) in frame.views.iter().enumerate() {
            image::write_rgb8(&view_file(&dir, v, "rgb"), &img.rgb)?;
            let mask: Vec<u8> = img.mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
            image::write_gray8(&view_file(&dir, v, "mask"), img.width(), img.height(), &mask)?;
            if let (true, Some(depth)) = (has_depth, &img.depth_mm) {
                image::write_gray16(&view_file(&dir, v, "depth"), img.width(), img.height(), depth)?;
            }
        }
        records.push(FrameRecord {
            index: frame.index,
            dir: name,
            pose: frame.pose.clone(),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        width: ds.width,
        height: ds.height,
        cameras: ds.cameras.clone(),
        skeleton: ds.skeleton.clone(),
        subject: ds.subject.clone(),
        has_depth,
        frames: records,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.clone())
        } else {
            Error::io(&path, e)
        }
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Manifest("missing schema_version".into()))? as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))?;
    for cam in &m.cameras {
        cam.validate()?;
        if cam.width != m.width || cam.height != m.height {
            return Err(Error::Manifest("camera size differs from dataset size".into()));
        }
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for rec in m.frames {
        let dir = root.join(&rec.dir);
        let mut views = Vec::with_capacity(m.cameras.len());
        for v in 0..m.cameras.len() {
            let missing = |kind: &str| {
                let path = view_file(&dir, v, kind);
                (!path.exists()).then_some(Error::MissingView {
                    frame: rec.index,
                    view: v,
                    path,
                })
            };
            let mut kinds = vec!["rgb", "mask"];
            if m.has_depth {
                kinds.push("depth");
            }
            if let Some(err) = kinds.into_iter().find_map(missing) {
                return Err(err);
            }
            let rgb = image::read_rgb8(&view_file(&dir, v, "rgb"))?;
            let (mw, mh, mask) = image::read_gray8(&view_file(&dir, v, "mask"))?;
            let depth_mm = if m.has_depth {
                let (dw, dh, d) = image::read_gray16(&view_file(&dir, v, "depth"))?;
                if (dw, dh) != (m.width, m.height) {
                    return Err(Error::SizeMismatch(format!("depth map of frame {} view {v}", rec.index)));
                }
                Some(d)
            } else {
                None
            };
            if (rgb.width, rgb.height) != (m.width, m.height) || (mw, mh) != (m.width, m.height) {
                return Err(Error::SizeMismatch(format!("images of frame {} view {v}", rec.index)));
            }
            views.push(ViewImages {
                rgb,
                mask: mask.iter().map(|&x| (x > 127) as u8).collect(),
                depth_mm,
            });
        }
        if rec.pose.rotations.len() != m.skeleton.num_joints() {
            return Err(Error::Manifest(format!("pose of frame {} has the wrong joint count", rec.index)));
        }
        frames.push(DatasetFrame {
            index: rec.index,
            pose: rec.pose,
            views,
        });
    }
    Ok(Dataset {
        width: m.width,
        height: m.height,
        cameras: m.cameras,
        skeleton: m.skeleton,
        subject: m.subject,
        frames,
    })
}
