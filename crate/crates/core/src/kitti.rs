//! KITTI-format ingestion and output: detection dumps, ego-motion poses,
//! camera calibration, and tracking labels. Detections are transformed into
//! the global frame (the ego pose at the first frame of the sequence).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::postprocess::{CameraCalib, OutputBox, TrackSet};
use crate::scalar::Real;
use crate::types::{auto_confidence_offset, normalize_confidence, wrap_angle, Detection};

/// Rigid transform mapping the ego frame at `frame` into the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoPose<T: Real> {
    pub frame: usize,
    pub transform: Matrix4<T>,
}

impl<T: Real> EgoPose<T> {
    pub fn identity(frame: usize) -> Self {
        Self {
            frame,
            transform: Matrix4::identity(),
        }
    }

    pub fn rotation(&self) -> Matrix3<T> {
        self.transform.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<T> {
        self.transform.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Inverse rigid transform (global frame to this ego frame).
    pub fn inverse(&self) -> Matrix4<T> {
        let r_t = self.rotation().transpose();
        let t = -r_t * self.translation();
        let mut out = Matrix4::identity();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_t);
        out.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        out
    }

    fn validate(&self, is_first: bool) -> Result<()> {
        let tol = T::of(1e-6);
        let r = self.rotation();
        let ortho = r.transpose() * r - Matrix3::identity();
        if ortho.amax() > tol || (r.determinant() - T::one()).abs() > tol {
            return Err(Error::Input(format!(
                "pose at frame {} is not a proper rotation",
                self.frame
            )));
        }
        if is_first && (self.transform - Matrix4::identity()).amax() > tol {
            return Err(Error::Input(
                "first-frame pose must be the identity (global frame anchor)".into(),
            ));
        }
        Ok(())
    }
}

/// Applies a rigid 4x4 to a point.
pub fn transform_point<T: Real>(m: &Matrix4<T>, p: &Vector3<T>) -> Vector3<T> {
    let h = m * Vector4::new(p.x, p.y, p.z, T::one());
    Vector3::new(h.x, h.y, h.z)
}

/// Maps a heading angle (rotation about the camera y axis) through the
/// rotation part of a rigid 4x4, projecting onto the horizontal plane.
pub fn transform_yaw<T: Real>(m: &Matrix4<T>, yaw: T) -> T {
    let heading = Vector3::new(yaw.cos(), T::zero(), -yaw.sin());
    let rotated = m.fixed_view::<3, 3>(0, 0) * heading;
    wrap_angle(T::atan2(-rotated.z, rotated.x))
}

/// Everything one sequence needs: detections per frame, poses, calibration.
#[derive(Debug, Clone)]
pub struct SequenceBundle<T: Real> {
    pub detections: BTreeMap<usize, Vec<Detection<T>>>,
    pub poses: Vec<EgoPose<T>>,
    pub calib: Option<CameraCalib<T>>,
    pub frame_count: usize,
}

impl<T: Real> SequenceBundle<T> {
    pub fn new(
        detections: BTreeMap<usize, Vec<Detection<T>>>,
        poses: Vec<EgoPose<T>>,
        calib: Option<CameraCalib<T>>,
    ) -> Result<Self> {
        let last_det = detections.keys().next_back().copied();
        let frame_count = last_det
            .map(|f| f + 1)
            .unwrap_or(0)
            .max(poses.len());
        if let Some(last) = last_det {
            if !poses.is_empty() && poses.len() <= last {
                return Err(Error::Input(format!(
                    "poses cover {} frames but detections reach frame {last}",
                    poses.len()
                )));
            }
        }
        Ok(Self {
            detections,
            poses,
            calib,
            frame_count,
        })
    }

    /// Dense per-frame detection lists over `0..frame_count`.
    pub fn dense_frames(&self) -> Vec<Vec<Detection<T>>> {
        let mut frames = vec![Vec::new(); self.frame_count];
        for (f, dets) in &self.detections {
            frames[*f] = dets.clone();
        }
        frames
    }
}

/// KITTI class-id mapping used by the detection dumps.
pub fn class_name(class_id: i32) -> String {
    match class_id {
        1 => "Pedestrian".into(),
        2 => "Car".into(),
        3 => "Cyclist".into(),
        4 => "Van".into(),
        5 => "Truck".into(),
        6 => "Person_sitting".into(),
        7 => "Tram".into(),
        8 => "Misc".into(),
        9 => "DontCare".into(),
        other => format!("Type{other}"),
    }
}

pub fn class_id(name: &str) -> Option<i32> {
    match name {
        "Pedestrian" => Some(1),
        "Car" => Some(2),
        "Cyclist" => Some(3),
        "Van" => Some(4),
        "Truck" => Some(5),
        "Person_sitting" => Some(6),
        "Tram" => Some(7),
        "Misc" => Some(8),
        "DontCare" => Some(9),
        other => other.strip_prefix("Type").and_then(|n| n.parse().ok()),
    }
}

/// Parses a detection dump: one comma-separated detection per line with the
/// fixed column order `frame, type, bb_left, bb_top, bb_right, bb_bottom,
/// score, h, w, l, x, y, z, rot_y`. Detections are grouped by frame with the
/// file order preserved within each frame.
pub fn detections_from_str<T: Real>(text: &str) -> Result<BTreeMap<usize, Vec<Detection<T>>>> {
    let mut out: BTreeMap<usize, Vec<Detection<T>>> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 14 {
            return Err(parse_err(format!(
                "expected 14 comma-separated fields, got {}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("field {}: bad number `{}`: {e}", i + 1, fields[i])))
        };
        let frame = num(0)? as i64;
        if frame < 0 {
            return Err(parse_err("negative frame index".into()));
        }
        let class = num(1)? as i32;
        let bbox = [
            T::of(num(2)?),
            T::of(num(3)?),
            T::of(num(4)?),
            T::of(num(5)?),
        ];
        let score = T::of(num(6)?);
        let dims = [T::of(num(7)?), T::of(num(8)?), T::of(num(9)?)];
        let position = Vector3::new(T::of(num(10)?), T::of(num(11)?), T::of(num(12)?));
        let yaw = wrap_angle(T::of(num(13)?));
        out.entry(frame as usize).or_default().push(Detection {
            frame: frame as usize,
            position,
            dims,
            yaw,
            confidence: score,
            class_id: class,
            bbox2d: Some(bbox),
        });
    }
    Ok(out)
}

pub fn parse_detections<T: Real>(path: &Path) -> Result<BTreeMap<usize, Vec<Detection<T>>>> {
    detections_from_str(&std::fs::read_to_string(path)?)
}

/// Renders a dense per-frame detection stream in the ingestion format, at
/// full float precision so the values survive a parse round trip.
pub fn detections_to_string<T: Real>(frames: &[Vec<Detection<T>>]) -> String {
    let mut out = String::new();
    for (f, dets) in frames.iter().enumerate() {
        for d in dets {
            let bbox = d
                .bbox2d
                .unwrap_or([T::of(-1.0), T::of(-1.0), T::of(-1.0), T::of(-1.0)]);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                f,
                d.class_id,
                bbox[0],
                bbox[1],
                bbox[2],
                bbox[3],
                d.confidence,
                d.dims[0],
                d.dims[1],
                d.dims[2],
                d.position.x,
                d.position.y,
                d.position.z,
                d.yaw
            );
        }
    }
    out
}

/// Parses ego poses: one 3x4 row-major rigid transform per line, the frame
/// index implicit in the line number.
pub fn poses_from_str<T: Real>(text: &str) -> Result<Vec<EgoPose<T>>> {
    let mut poses = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| parse_err(format!("bad number `{v}`: {e}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(parse_err(format!("expected 12 values, got {}", vals.len())));
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = T::of(vals[4 * r + c]);
            }
        }
        let pose = EgoPose {
            frame: poses.len(),
            transform: m,
        };
        pose.validate(poses.is_empty())
            .map_err(|e| parse_err(e.to_string()))?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn parse_poses<T: Real>(path: &Path) -> Result<Vec<EgoPose<T>>> {
    poses_from_str(&std::fs::read_to_string(path)?)
}

/// Parses camera calibration: a `P:` (or `P2:`) line with 12 row-major
/// values and a `size: width height` line.
pub fn calib_from_str<T: Real>(text: &str) -> Result<CameraCalib<T>> {
    let mut projection: Option<Matrix3x4<T>> = None;
    let mut size: Option<[T; 2]> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| parse_err(format!("bad number `{v}`: {e}")))
            })
            .collect::<Result<_>>()?;
        match key.trim() {
            "P" | "P2" => {
                if vals.len() != 12 {
                    return Err(parse_err(format!(
                        "projection needs 12 values, got {}",
                        vals.len()
                    )));
                }
                let conv: Vec<T> = vals.iter().map(|v| T::of(*v)).collect();
                projection = Some(Matrix3x4::from_row_slice(&conv));
            }
            "size" => {
                if vals.len() != 2 || vals[0] <= 0.0 || vals[1] <= 0.0 {
                    return Err(parse_err("size needs two positive values".into()));
                }
                size = Some([T::of(vals[0]), T::of(vals[1])]);
            }
            _ => {}
        }
    }
    match (projection, size) {
        (Some(projection), Some(image_size)) => Ok(CameraCalib {
            projection,
            image_size,
        }),
        _ => Err(Error::Input(
            "calibration needs a P/P2 line and a size line".into(),
        )),
    }
}

pub fn parse_calib<T: Real>(path: &Path) -> Result<CameraCalib<T>> {
    calib_from_str(&std::fs::read_to_string(path)?)
}

/// Maps detections into the global frame through their frame's ego pose;
/// dimensions and score are unchanged.
pub fn apply_ego_motion<T: Real>(
    detections: BTreeMap<usize, Vec<Detection<T>>>,
    poses: &[EgoPose<T>],
) -> Result<BTreeMap<usize, Vec<Detection<T>>>> {
    let mut out = BTreeMap::new();
    for (frame, dets) in detections {
        let pose = poses
            .get(frame)
            .ok_or_else(|| Error::Input(format!("no ego pose for frame {frame}")))?;
        let mapped = dets
            .into_iter()
            .map(|mut d| {
                d.position = transform_point(&pose.transform, &d.position);
                d.yaw = transform_yaw(&pose.transform, d.yaw);
                d
            })
            .collect();
        out.insert(frame, mapped);
    }
    Ok(out)
}

/// Shifts all confidences into the non-negative range. With `offset = None`
/// the offset is the magnitude of the most negative raw confidence in the
/// set. Returns the offset applied.
pub fn normalize_detections<T: Real>(
    detections: &mut BTreeMap<usize, Vec<Detection<T>>>,
    offset: Option<T>,
) -> Result<T> {
    let offset = offset.unwrap_or_else(|| {
        auto_confidence_offset(
            detections
                .values()
                .flat_map(|v| v.iter().map(|d| d.confidence)),
        )
    });
    for dets in detections.values_mut() {
        for d in dets.iter_mut() {
            d.confidence = normalize_confidence(d.confidence, offset)?;
        }
    }
    Ok(offset)
}

/// Converts output boxes from the global frame back into their frame's ego
/// (camera) frame. With no poses the boxes pass through unchanged.
pub fn to_camera_frame<T: Real>(set: TrackSet<T>, poses: &[EgoPose<T>]) -> Result<TrackSet<T>> {
    if poses.is_empty() {
        return Ok(set);
    }
    let mut tracks = set.tracks;
    for track in &mut tracks {
        for b in &mut track.boxes {
            let pose = poses
                .get(b.frame)
                .ok_or_else(|| Error::Input(format!("no ego pose for frame {}", b.frame)))?;
            let inv = pose.inverse();
            b.position = transform_point(&inv, &b.position);
            b.yaw = transform_yaw(&inv, b.yaw);
        }
    }
    Ok(TrackSet { tracks })
}

fn format_label_line<T: Real>(b: &OutputBox<T>) -> String {
    let bbox = b.bbox2d.unwrap_or([T::of(-1.0), T::of(-1.0), T::of(-1.0), T::of(-1.0)]);
    format!(
        "{} {} {} -1 -1 -10 {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.6}",
        b.frame,
        b.track_id,
        class_name(b.class_id),
        bbox[0],
        bbox[1],
        bbox[2],
        bbox[3],
        b.dims[0],
        b.dims[1],
        b.dims[2],
        b.position.x,
        b.position.y,
        b.position.z,
        b.yaw,
        b.confidence
    )
}

/// Renders a track set in the KITTI tracking label format, one box per line,
/// sorted by frame then track id.
pub fn labels_to_string<T: Real>(set: &TrackSet<T>) -> String {
    let mut boxes: Vec<&OutputBox<T>> = set.all_boxes().collect();
    boxes.sort_by_key(|b| (b.frame, b.track_id));
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format_label_line(b));
        out.push('\n');
    }
    out
}

pub fn write_labels<T: Real>(set: &TrackSet<T>, path: &Path) -> Result<()> {
    std::fs::write(path, labels_to_string(set))?;
    Ok(())
}

/// Parses the KITTI tracking label format back into a track set. A bbox of
/// four `-1` values reads back as absent.
pub fn labels_from_str<T: Real>(text: &str) -> Result<TrackSet<T>> {
    let mut boxes = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        // 18 fields with the trailing score; ground-truth files omit it.
        if fields.len() != 18 && fields.len() != 17 {
            return Err(parse_err(format!(
                "expected 17 or 18 fields, got {}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("field {}: bad number `{}`: {e}", i + 1, fields[i])))
        };
        let frame = num(0)? as usize;
        let track_id = num(1)? as u64;
        let class_id = class_id(fields[2])
            .ok_or_else(|| parse_err(format!("unknown type `{}`", fields[2])))?;
        let bbox = [num(6)?, num(7)?, num(8)?, num(9)?];
        let bbox2d = if bbox.iter().all(|v| *v == -1.0) {
            None
        } else {
            Some([T::of(bbox[0]), T::of(bbox[1]), T::of(bbox[2]), T::of(bbox[3])])
        };
        let confidence = if fields.len() == 18 {
            T::of(num(17)?)
        } else {
            T::one()
        };
        boxes.push(OutputBox {
            frame,
            track_id,
            class_id,
            position: Vector3::new(T::of(num(13)?), T::of(num(14)?), T::of(num(15)?)),
            dims: [T::of(num(10)?), T::of(num(11)?), T::of(num(12)?)],
            yaw: T::of(num(16)?),
            confidence,
            bbox2d,
        });
    }
    Ok(TrackSet::from_boxes(boxes))
}

pub fn parse_labels<T: Real>(path: &Path) -> Result<TrackSet<T>> {
    labels_from_str(&std::fs::read_to_string(path)?)
}
