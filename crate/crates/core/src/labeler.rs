//! Pose labels from RGB-D scans and annotated 3-D boxes.
//!
//! Depth frames with known camera poses fuse into a world point cloud. For
//! each annotated box, every frame that sees enough of the box's corners
//! gets an object-to-camera pose from PnP between the projected corners and
//! the corners in box coordinates. The viewing angles of that pose become
//! the label.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Annotation;
use crate::geometry::{
    azel_to_rotation, backproject_depth, bbox_corners, invert_transform, object_corners, rot_z, rotation_to_azel,
    solve_pnp, Bbox3D, CameraIntrinsics, DepthImage, GeometryError, PnpOptions, RigidTransform, ViewAngles,
};

pub const DEFAULT_MIN_VISIBLE_CORNERS: usize = 6;

#[derive(Debug, Error)]
pub enum LabelerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("frame {frame}: depth {path}: {msg}")]
    Depth { frame: String, path: PathBuf, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no frames")]
    NoFrames,
    #[error("nothing to export")]
    NothingToExport,
}

fn io(path: &Path, source: std::io::Error) -> LabelerError {
    LabelerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One RGB-D frame; only depth is used.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: String,
    pub depth_path: PathBuf,
    pub camera_to_world: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

/// An annotated box in world coordinates. The box frame is the object
/// frame: +X front, +Z up.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxAnnotation {
    pub object_id: String,
    pub category: String,
    pub mesh_id: Option<String>,
    pub bbox: Bbox3D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub frame_id: String,
    /// Relative to the manifest's directory.
    pub depth_path: String,
    /// 4x4 camera-to-world matrix, row-major.
    pub camera_to_world: Vec<f64>,
    pub intrinsics: IntrinsicsSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub object_id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_id: Option<String>,
    pub center: [f64; 3],
    /// Full extents along the box's X, Y, Z axes.
    pub dims: [f64; 3],
    /// Box-to-world rotation, row-major 3x3.
    pub rotation: Vec<f64>,
}

/// JSON scene description: frames plus box annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub frames: Vec<FrameSpec>,
    pub boxes: Vec<BoxSpec>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BoxAnnotation>,
}

fn rigid_from_rows(m: &[f64]) -> Result<RigidTransform, String> {
    if m.len() != 16 {
        return Err(format!("camera_to_world needs 16 values, got {}", m.len()));
    }
    if m[12..] != [0.0, 0.0, 0.0, 1.0] {
        return Err(format!("last row must be 0 0 0 1, got {:?}", &m[12..]));
    }
    let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    RigidTransform::new(r, Vector3::new(m[3], m[7], m[11])).map_err(|e| e.to_string())
}

fn rigid_to_rows(t: &RigidTransform) -> Vec<f64> {
    let (r, p) = (t.rotation(), t.translation());
    let mut out = Vec::with_capacity(16);
    for i in 0..3 {
        out.extend([r[(i, 0)], r[(i, 1)], r[(i, 2)], p[i]]);
    }
    out.extend([0.0, 0.0, 0.0, 1.0]);
    out
}

impl SceneManifest {
    /// Validates every pose, intrinsics block and box, and resolves depth
    /// paths against `base`.
    pub fn resolve(&self, base: &Path) -> Result<Scene, String> {
        let mut frames = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let ctx = |e: String| format!("frame {:?}: {e}", f.frame_id);
            let i = &f.intrinsics;
            frames.push(Frame {
                frame_id: f.frame_id.clone(),
                depth_path: base.join(&f.depth_path),
                camera_to_world: rigid_from_rows(&f.camera_to_world).map_err(ctx)?,
                intrinsics: CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, i.width, i.height)
                    .map_err(|e| ctx(e.to_string()))?,
            });
        }
        let mut boxes = Vec::with_capacity(self.boxes.len());
        for b in &self.boxes {
            let ctx = |e: String| format!("box {:?}: {e}", b.object_id);
            if b.rotation.len() != 9 {
                return Err(ctx(format!("rotation needs 9 values, got {}", b.rotation.len())));
            }
            let r = Matrix3::from_row_slice(&b.rotation);
            let bbox = Bbox3D::new(Point3::from(b.center), Vector3::from(b.dims), r).map_err(|e| ctx(e.to_string()))?;
            boxes.push(BoxAnnotation {
                object_id: b.object_id.clone(),
                category: b.category.clone(),
                mesh_id: b.mesh_id.clone(),
                bbox,
            });
        }
        Ok(Scene { frames, boxes })
    }
}

pub fn load_manifest(path: &Path) -> Result<Scene, LabelerError> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let bad = |msg: String| LabelerError::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let m: SceneManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    m.resolve(path.parent().unwrap_or(Path::new("."))).map_err(bad)
}

/// 16-bit PGM in millimeters to meters; zero means no reading.
pub fn read_depth_pgm(path: &Path) -> Result<DepthImage, String> {
    let img = image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    let luma = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => return Err(format!("expected a 16-bit grayscale image, got {:?}", other.color())),
    };
    let (w, h) = luma.dimensions();
    Ok(DepthImage::new(w, h, luma.into_raw().into_iter().map(|mm| mm as f32 / 1000.0).collect()))
}

/// Meters to 16-bit millimeters, rounded; out-of-range or invalid depths
/// become 0.
pub fn write_depth_pgm(path: &Path, depth: &DepthImage) -> Result<(), LabelerError> {
    let raw: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| {
            let mm = (d as f64 * 1000.0).round();
            if d.is_finite() && mm > 0.0 && mm <= u16::MAX as f64 {
                mm as u16
            } else {
                0
            }
        })
        .collect();
    // The image crate decodes 16-bit PGM but does not encode it.
    let file = std::fs::File::create(path).map_err(|e| io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "P5\n{} {}\n65535\n", depth.width, depth.height).map_err(|e| io(path, e))?;
    for v in raw {
        w.write_all(&v.to_be_bytes()).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

/// World points from every frame's valid depth pixels, keeping pixels whose
/// row and column are multiples of `stride`. Frames are concatenated in
/// input order.
pub fn fuse_pointcloud(frames: &[Frame], stride: usize) -> Result<Vec<Point3<f64>>, LabelerError> {
    if frames.is_empty() {
        return Err(LabelerError::NoFrames);
    }
    let stride = stride.max(1);
    let clouds = frames
        .par_iter()
        .map(|f| {
            let depth = read_depth_pgm(&f.depth_path).map_err(|msg| LabelerError::Depth {
                frame: f.frame_id.clone(),
                path: f.depth_path.clone(),
                msg,
            })?;
            let sub = subsample_depth(&depth, stride);
            let k = &f.intrinsics;
            let ks = CameraIntrinsics {
                fx: k.fx / stride as f64,
                fy: k.fy / stride as f64,
                cx: k.cx / stride as f64,
                cy: k.cy / stride as f64,
                width: sub.width,
                height: sub.height,
            };
            Ok(backproject_depth(&sub, &ks, &f.camera_to_world))
        })
        .collect::<Result<Vec<_>, LabelerError>>()?;
    Ok(clouds.into_iter().flatten().collect())
}

/// Keeps pixel `(s u, s v)` at `(u, v)`. Combined with intrinsics divided
/// by `s` this backprojects each kept pixel exactly where the full image
/// would.
fn subsample_depth(d: &DepthImage, s: usize) -> DepthImage {
    if s == 1 {
        return d.clone();
    }
    let w = (d.width as usize).div_ceil(s);
    let h = (d.height as usize).div_ceil(s);
    let mut data = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            data.push(d.at((u * s) as u32, (v * s) as u32));
        }
    }
    DepthImage::new(w as u32, h as u32, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    /// Fewer than the threshold of corners in front of the camera.
    BehindCamera,
    /// Enough corners in front, but too few inside the image.
    Truncated,
    /// PnP failed on the visible corners.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseLabel {
    pub frame_id: String,
    pub object_id: String,
    pub category: String,
    pub mesh_id: String,
    /// Object-to-camera.
    pub pose: RigidTransform,
    pub view: ViewAngles,
    /// All eight corners projected, [`object_corners`] order; corners
    /// behind the camera are `None`.
    pub corners_px: Vec<Option<Point2<f64>>>,
    pub visible_corners: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FrameOutcome {
    Labeled(PoseLabel),
    Skipped {
        frame_id: String,
        object_id: String,
        reason: SkipReason,
        detail: String,
    },
}

impl FrameOutcome {
    pub fn frame_id(&self) -> &str {
        match self {
            FrameOutcome::Labeled(l) => &l.frame_id,
            FrameOutcome::Skipped { frame_id, .. } => frame_id,
        }
    }

    pub fn object_id(&self) -> &str {
        match self {
            FrameOutcome::Labeled(l) => &l.object_id,
            FrameOutcome::Skipped { object_id, .. } => object_id,
        }
    }
}

/// Labels one box in every frame. Outcomes follow frame order.
pub fn label_poses(b: &BoxAnnotation, frames: &[Frame], min_visible_corners: usize) -> Vec<FrameOutcome> {
    let world = bbox_corners(&b.bbox);
    let object = object_corners(b.bbox.dims());
    frames
        .par_iter()
        .map(|f| label_frame(b, f, &world, &object, min_visible_corners))
        .collect()
}

fn label_frame(
    b: &BoxAnnotation,
    f: &Frame,
    world: &[Point3<f64>; 8],
    object: &[Point3<f64>; 8],
    min_visible: usize,
) -> FrameOutcome {
    let skip = |reason, detail: String| FrameOutcome::Skipped {
        frame_id: f.frame_id.clone(),
        object_id: b.object_id.clone(),
        reason,
        detail,
    };
    let world_to_camera = invert_transform(&f.camera_to_world);
    let k = &f.intrinsics;
    let mut corners_px = Vec::with_capacity(8);
    let (mut in_front, mut px, mut obj) = (0, Vec::new(), Vec::new());
    for (w, o) in world.iter().zip(object) {
        let pc = world_to_camera.apply(w);
        if pc.z > 0.0 {
            in_front += 1;
            let p = k.project(&pc);
            if k.contains(&p) {
                px.push(p);
                obj.push(*o);
            }
            corners_px.push(Some(p));
        } else {
            corners_px.push(None);
        }
    }
    if in_front < min_visible {
        return skip(SkipReason::BehindCamera, format!("{in_front} of 8 corners in front of the camera"));
    }
    if px.len() < min_visible {
        return skip(SkipReason::Truncated, format!("{} of 8 corners inside the image", px.len()));
    }
    match solve_pnp(&px, &obj, k, &PnpOptions::default()) {
        Ok(pose) => FrameOutcome::Labeled(PoseLabel {
            frame_id: f.frame_id.clone(),
            object_id: b.object_id.clone(),
            category: b.category.clone(),
            mesh_id: b.mesh_id.clone().unwrap_or_else(|| b.object_id.clone()),
            view: rotation_to_azel(pose.rotation()),
            pose,
            corners_px,
            visible_corners: px.len(),
        }),
        Err(e) => skip(SkipReason::Degenerate, e.to_string()),
    }
}

/// Counts per outcome; `labeled` plus every skip reason equals `total`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub total: usize,
    pub labeled: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
}

impl ExportSummary {
    pub fn of(results: &[FrameOutcome]) -> Self {
        let mut s = ExportSummary {
            total: results.len(),
            ..Default::default()
        };
        for reason in [SkipReason::BehindCamera, SkipReason::Truncated, SkipReason::Degenerate] {
            s.skipped.insert(reason, 0);
        }
        for r in results {
            match r {
                FrameOutcome::Labeled(_) => s.labeled += 1,
                FrameOutcome::Skipped { reason, .. } => *s.skipped.entry(*reason).or_default() += 1,
            }
        }
        s
    }
}

/// Summary written next to an export: `labels.jsonl` -> `labels.summary.json`.
pub fn summary_path(out_path: &Path) -> PathBuf {
    let stem = out_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out_path.with_file_name(format!("{stem}.summary.json"))
}

/// Writes labeled outcomes as annotation lines sorted by frame id then
/// object id, and the outcome counts to [`summary_path`].
pub fn export_labels(results: &[FrameOutcome], out_path: &Path) -> Result<ExportSummary, LabelerError> {
    if results.is_empty() {
        return Err(LabelerError::NothingToExport);
    }
    let mut labeled: Vec<&PoseLabel> = results
        .iter()
        .filter_map(|r| match r {
            FrameOutcome::Labeled(l) => Some(l),
            FrameOutcome::Skipped { .. } => None,
        })
        .collect();
    labeled.sort_by(|a, b| (&a.frame_id, &a.object_id).cmp(&(&b.frame_id, &b.object_id)));
    let mut w = std::io::BufWriter::new(std::fs::File::create(out_path).map_err(|e| io(out_path, e))?);
    for l in labeled {
        let a = Annotation {
            sample_id: format!("{}_{}", l.frame_id, l.object_id),
            category: l.category.clone(),
            mesh_id: l.mesh_id.clone(),
            azimuth_deg: l.view.azimuth,
            elevation_deg: l.view.elevation,
            normal_path: None,
            reshading_path: None,
            mask_path: None,
            gt_mask_path: None,
        };
        writeln!(w, "{}", serde_json::to_string(&a).expect("serializable")).map_err(|e| io(out_path, e))?;
    }
    w.flush().map_err(|e| io(out_path, e))?;
    let summary = ExportSummary::of(results);
    let sp = summary_path(out_path);
    let json = serde_json::to_string_pretty(&summary).expect("serializable") + "\n";
    std::fs::write(&sp, json).map_err(|e| io(&sp, e))?;
    Ok(summary)
}

/// Labels every box of a scene against every frame, sorted by frame id then
/// object id.
pub fn label_scene(scene: &Scene, min_visible_corners: usize) -> Vec<FrameOutcome> {
    let mut out: Vec<FrameOutcome> = scene
        .boxes
        .iter()
        .flat_map(|b| label_poses(b, &scene.frames, min_visible_corners))
        .collect();
    out.sort_by(|a, b| (a.frame_id(), a.object_id()).cmp(&(b.frame_id(), b.object_id())));
    out
}

/// Ground truth of a synthetic frame, per box.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub frame_id: String,
    pub object_id: String,
    pub view: ViewAngles,
}

/// Camera at `view` around `target` looking at it, as camera-to-world.
/// `box_to_world` rotates the viewing angles from box to world coordinates.
pub fn look_at_camera(target: &Point3<f64>, box_rotation: &Matrix3<f64>, view: &ViewAngles, distance: f64) -> RigidTransform {
    let r_obj_cam = azel_to_rotation(view);
    // world -> camera rotation: R_oc * R_bw^T
    let r_wc = r_obj_cam * box_rotation.transpose();
    let cam_center = target + box_rotation * view.direction() * distance;
    let world_to_camera = RigidTransform::new(r_wc, -(r_wc * cam_center.coords)).expect("orthonormal");
    invert_transform(&world_to_camera)
}

/// Renders the floor plane `z = 0` into a depth image; rays that miss it
/// or hit behind the camera read 0.
pub fn render_floor_depth(camera_to_world: &RigidTransform, k: &CameraIntrinsics) -> DepthImage {
    let r = camera_to_world.rotation();
    let o = camera_to_world.translation();
    let mut data = Vec::with_capacity(k.width as usize * k.height as usize);
    for v in 0..k.height {
        for u in 0..k.width {
            // Ray with camera-frame z = 1.
            let dir_c = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dir_w = r * dir_c;
            let t = if dir_w.z.abs() > 1e-12 { -o.z / dir_w.z } else { -1.0 };
            data.push(if t > 0.0 && t * 1000.0 < u16::MAX as f64 { t as f32 } else { 0.0 });
        }
    }
    DepthImage::new(k.width, k.height, data)
}

/// Options for [`synth_scene`].
#[derive(Clone, Debug)]
pub struct SynthSceneConfig {
    pub seed: u64,
    /// Frames looking at the first box from random viewpoints.
    pub n_views: usize,
    /// Frames facing away from all boxes.
    pub n_away: usize,
    /// Frames whose box projection runs off the image edge.
    pub n_truncated: usize,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_views: 8,
            n_away: 2,
            n_truncated: 2,
            image_width: 160,
            image_height: 120,
        }
    }
}

/// Writes a manifest (`scene.json`) and floor depth maps for a room with
/// two boxes, returning the true viewing angles of the first box in each
/// deliberately placed view.
pub fn synth_scene(dir: &Path, cfg: &SynthSceneConfig) -> Result<Vec<SyntheticTruth>, LabelerError> {
    std::fs::create_dir_all(dir.join("depth")).map_err(|e| io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = CameraIntrinsics::new(
        cfg.image_width as f64,
        cfg.image_width as f64,
        (cfg.image_width as f64 - 1.0) / 2.0,
        (cfg.image_height as f64 - 1.0) / 2.0,
        cfg.image_width,
        cfg.image_height,
    )?;
    let boxes = vec![
        BoxSpec {
            object_id: "obj0".into(),
            category: "chair".into(),
            mesh_id: Some("chair_0".into()),
            center: [1.0, 0.5, 0.45],
            dims: [0.5, 0.55, 0.9],
            rotation: rot_z(rng.random_range(0.0..360.0)).transpose().as_slice().to_vec(),
        },
        BoxSpec {
            object_id: "obj1".into(),
            category: "table".into(),
            mesh_id: Some("table_0".into()),
            center: [-1.5, -1.0, 0.37],
            dims: [0.8, 1.4, 0.74],
            rotation: rot_z(rng.random_range(0.0..360.0)).transpose().as_slice().to_vec(),
        },
    ];
    // `as_slice` is column-major, so the transposes above yield row-major.
    let b0 = &boxes[0];
    let r0 = Matrix3::from_row_slice(&b0.rotation);
    let c0 = Point3::from(b0.center);

    let mut frames = Vec::new();
    let mut truth = Vec::new();
    let add = |id: String, cam: RigidTransform, frames: &mut Vec<FrameSpec>| -> Result<(), LabelerError> {
        let rel = format!("depth/{id}.pgm");
        write_depth_pgm(&dir.join(&rel), &render_floor_depth(&cam, &k))?;
        frames.push(FrameSpec {
            frame_id: id,
            depth_path: rel,
            camera_to_world: rigid_to_rows(&cam),
            intrinsics: IntrinsicsSpec {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                width: k.width,
                height: k.height,
            },
        });
        Ok(())
    };
    for i in 0..cfg.n_views {
        let view = ViewAngles::new(rng.random_range(0.0..360.0), rng.random_range(5.0..60.0));
        let cam = look_at_camera(&c0, &r0, &view, rng.random_range(3.0..5.0));
        let id = format!("f{i:03}");
        add(id.clone(), cam, &mut frames)?;
        truth.push(SyntheticTruth {
            frame_id: id,
            object_id: b0.object_id.clone(),
            view,
        });
    }
    for i in 0..cfg.n_away {
        // Look at the box, then spin the camera half a turn about its own
        // vertical axis so it faces away from both boxes.
        let view = ViewAngles::new(rng.random_range(0.0..360.0), 10.0);
        let cam = look_at_camera(&c0, &r0, &view, 6.0);
        let flip = RigidTransform::new(
            Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0),
            Vector3::zeros(),
        )?;
        add(format!("a{i:03}"), cam.compose(&flip), &mut frames)?;
    }
    for i in 0..cfg.n_truncated {
        // Close view with the box center pushed toward the image corner.
        let view = ViewAngles::new(rng.random_range(0.0..360.0), 20.0);
        let cam = look_at_camera(&c0, &r0, &view, 1.6);
        let shift = RigidTransform::new(Matrix3::identity(), Vector3::new(0.45, 0.35, 0.0))?;
        add(format!("t{i:03}"), cam.compose(&shift), &mut frames)?;
    }
    let manifest = SceneManifest { frames, boxes };
    let path = dir.join("scene.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable") + "\n").map_err(|e| io(&path, e))?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(id: &str, cam: RigidTransform, k: CameraIntrinsics) -> Frame {
        Frame {
            frame_id: id.into(),
            depth_path: PathBuf::new(),
            camera_to_world: cam,
            intrinsics: k,
        }
    }

    fn unit_box() -> BoxAnnotation {
        BoxAnnotation {
            object_id: "b".into(),
            category: "chair".into(),
            mesh_id: None,
            bbox: Bbox3D::new(Point3::new(0.0, 0.0, 0.5), Vector3::new(0.6, 0.8, 1.0), rot_z(30.0)).unwrap(),
        }
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 200.0, 99.5, 79.5, 200, 160).unwrap()
    }

    #[test]
    fn recovers_view_angles() {
        let b = unit_box();
        let view = ViewAngles::new(123.0, 35.0);
        let cam = look_at_camera(&b.bbox.object_to_world().apply(&Point3::origin()), b.bbox.orientation(), &view, 4.0);
        let out = label_poses(&b, &[frame("f", cam, k())], 6);
        let FrameOutcome::Labeled(l) = &out[0] else { panic!("{out:?}") };
        assert!((l.view.azimuth - 123.0).abs() < 1e-3, "{:?}", l.view);
        assert!((l.view.elevation - 35.0).abs() < 1e-3);
        assert_eq!(l.visible_corners, 8);
    }

    #[test]
    fn facing_away_is_behind_camera() {
        let b = unit_box();
        let cam = look_at_camera(&Point3::new(0.0, 0.0, 0.5), b.bbox.orientation(), &ViewAngles::new(10.0, 10.0), 4.0);
        let flip = RigidTransform::new(Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0), Vector3::zeros()).unwrap();
        let out = label_poses(&b, &[frame("f", cam.compose(&flip), k())], 6);
        assert!(matches!(&out[0], FrameOutcome::Skipped { reason: SkipReason::BehindCamera, .. }), "{out:?}");
    }

    #[test]
    fn few_visible_corners_is_truncated() {
        let b = unit_box();
        let cam = look_at_camera(&Point3::new(0.0, 0.0, 0.5), b.bbox.orientation(), &ViewAngles::new(200.0, 25.0), 4.0);
        let world = bbox_corners(&b.bbox);
        let w2c = invert_transform(&cam);
        let mut xs: Vec<f64> = world.iter().map(|p| k().project(&w2c.apply(p)).x).collect();
        xs.sort_by(f64::total_cmp);
        // Crop the image so exactly 5 corners stay inside.
        let mut kk = k();
        kk.cx -= xs[3] + 0.5;
        kk.width = 10_000;
        let cut = kk.project(&w2c.apply(&Point3::origin()));
        let _ = cut;
        let visible = world.iter().filter(|p| kk.contains(&kk.project(&w2c.apply(p)))).count();
        assert_eq!(visible, 5);
        let out = label_poses(&b, &[frame("f", cam, kk)], 6);
        assert!(matches!(&out[0], FrameOutcome::Skipped { reason: SkipReason::Truncated, .. }), "{out:?}");
        let out = label_poses(&b, &[frame("f", cam, kk)], 5);
        assert!(matches!(&out[0], FrameOutcome::Labeled(_)) || matches!(&out[0], FrameOutcome::Skipped { reason: SkipReason::Degenerate, .. }));
    }

    #[test]
    fn depth_pgm_round_trip_in_millimeters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        let d = DepthImage::new(3, 2, vec![0.0, 1.0, 2.5, 65.535, 0.0015, f32::NAN]);
        write_depth_pgm(&p, &d).unwrap();
        let back = read_depth_pgm(&p).unwrap();
        assert_eq!(back.data, vec![0.0, 1.0, 2.5, 65.535, 0.002, 0.0]);
    }

    #[test]
    fn manifest_rejects_bad_matrix() {
        let mut m = SceneManifest {
            frames: vec![FrameSpec {
                frame_id: "f".into(),
                depth_path: "d.pgm".into(),
                camera_to_world: rigid_to_rows(&RigidTransform::identity()),
                intrinsics: IntrinsicsSpec {
                    fx: 100.0,
                    fy: 100.0,
                    cx: 50.0,
                    cy: 50.0,
                    width: 100,
                    height: 100,
                },
            }],
            boxes: vec![],
        };
        assert!(m.resolve(Path::new(".")).is_ok());
        m.frames[0].camera_to_world[0] = 2.0;
        assert!(m.resolve(Path::new(".")).is_err());
        m.frames[0].camera_to_world = vec![0.0; 12];
        assert!(m.resolve(Path::new(".")).is_err());
    }
}
