//! Box reconstruction from optimized positions plus associated detections,
//! confidence filtering, and 3D-to-2D flattening with the image-overlap
//! visibility filter.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::types::{Association, Detection, Track};

/// Minimum fraction of a projected box that must lie inside the image.
pub const MIN_IMAGE_OVERLAP: f64 = 0.25;

/// One reconstructed output box for a track at a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBox<T: Real> {
    pub frame: usize,
    pub track_id: u64,
    pub class_id: i32,
    /// Optimized position (KITTI convention: bottom-face center).
    pub position: Vector3<T>,
    /// Height, width, length from the matched detection or carried forward.
    pub dims: [T; 3],
    pub yaw: T,
    /// Matched detection confidence, or zero on null-hypothesis frames.
    pub confidence: T,
    /// `(left, top, right, bottom)` pixels, present once projection succeeds.
    pub bbox2d: Option<[T; 4]>,
}

/// All boxes of one output track, ascending by frame.
#[derive(Debug, Clone, Default)]
pub struct OutputTrack<T: Real> {
    pub id: u64,
    pub boxes: Vec<OutputBox<T>>,
}

impl<T: Real> OutputTrack<T> {
    pub fn mean_confidence(&self) -> T {
        if self.boxes.is_empty() {
            return T::zero();
        }
        let sum = self
            .boxes
            .iter()
            .fold(T::zero(), |acc, b| acc + b.confidence);
        sum / T::from_count(self.boxes.len())
    }
}

/// A set of finalized tracks, the output-level track representation.
#[derive(Debug, Clone, Default)]
pub struct TrackSet<T: Real> {
    pub tracks: Vec<OutputTrack<T>>,
}

impl<T: Real> TrackSet<T> {
    pub fn from_boxes(boxes: impl IntoIterator<Item = OutputBox<T>>) -> Self {
        let mut by_id: BTreeMap<u64, Vec<OutputBox<T>>> = BTreeMap::new();
        for b in boxes {
            by_id.entry(b.track_id).or_default().push(b);
        }
        let tracks = by_id
            .into_iter()
            .map(|(id, mut boxes)| {
                boxes.sort_by_key(|b| b.frame);
                OutputTrack { id, boxes }
            })
            .collect();
        Self { tracks }
    }

    pub fn all_boxes(&self) -> impl Iterator<Item = &OutputBox<T>> {
        self.tracks.iter().flat_map(|t| t.boxes.iter())
    }

    pub fn box_count(&self) -> usize {
        self.tracks.iter().map(|t| t.boxes.len()).sum()
    }

    /// Boxes grouped by frame, ascending.
    pub fn by_frame(&self) -> BTreeMap<usize, Vec<&OutputBox<T>>> {
        let mut map: BTreeMap<usize, Vec<&OutputBox<T>>> = BTreeMap::new();
        for b in self.all_boxes() {
            map.entry(b.frame).or_default().push(b);
        }
        map
    }
}

/// Combines a track's optimized positions with its associated detections:
/// matched frames copy dims, yaw and confidence from the detection;
/// null-hypothesis frames carry the previous box with zero confidence.
pub fn attach_boxes<T: Real>(
    track: &Track<T>,
    detections_by_frame: &BTreeMap<usize, Vec<Detection<T>>>,
) -> Result<Vec<OutputBox<T>>> {
    let mut boxes: Vec<OutputBox<T>> = Vec::with_capacity(track.len());
    for i in 0..track.len() {
        let frame = track.frame_at(i);
        let position = track.states[i].position;
        let bx = match track.associations[i] {
            Association::Detection(j) => {
                let det = detections_by_frame
                    .get(&frame)
                    .and_then(|v| v.get(j))
                    .ok_or_else(|| {
                        Error::Structure(format!(
                            "track {} references missing detection {j} at frame {frame}",
                            track.id
                        ))
                    })?;
                OutputBox {
                    frame,
                    track_id: track.id,
                    class_id: track.class_id,
                    position,
                    dims: det.dims,
                    yaw: det.yaw,
                    confidence: det.confidence,
                    bbox2d: None,
                }
            }
            Association::Null => {
                let prev = boxes.last().ok_or_else(|| {
                    Error::Structure(format!(
                        "track {} has a null-hypothesis association at its birth frame",
                        track.id
                    ))
                })?;
                OutputBox {
                    frame,
                    track_id: track.id,
                    class_id: track.class_id,
                    position,
                    dims: prev.dims,
                    yaw: prev.yaw,
                    confidence: T::zero(),
                    bbox2d: None,
                }
            }
        };
        boxes.push(bx);
    }
    Ok(boxes)
}

/// Removes tracks whose lifetime mean confidence is below `c_min`.
pub fn mean_confidence_filter<T: Real>(set: TrackSet<T>, c_min: T) -> TrackSet<T> {
    TrackSet {
        tracks: set
            .tracks
            .into_iter()
            .filter(|t| t.mean_confidence() >= c_min)
            .collect(),
    }
}

/// Camera model: 3x4 projection matrix plus image extent in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalib<T: Real> {
    pub projection: Matrix3x4<T>,
    /// `[width, height]` in pixels.
    pub image_size: [T; 2],
}

/// The eight corners of a yawed box. `position` is the bottom-face center;
/// yaw rotates about the vertical (camera y) axis; x spans the length and
/// z the width, with y growing downward.
pub fn box_corners<T: Real>(position: &Vector3<T>, dims: &[T; 3], yaw: T) -> [Vector3<T>; 8] {
    let [h, w, l] = *dims;
    let two = T::of(2.0);
    let (sin, cos) = (yaw.sin(), yaw.cos());
    let rot = Matrix3::new(
        cos,
        T::zero(),
        sin,
        T::zero(),
        T::one(),
        T::zero(),
        -sin,
        T::zero(),
        cos,
    );
    let mut corners = [Vector3::zeros(); 8];
    let mut i = 0;
    for xs in [l / two, -l / two] {
        for ys in [T::zero(), -h] {
            for zs in [w / two, -w / two] {
                corners[i] = position + rot * Vector3::new(xs, ys, zs);
                i += 1;
            }
        }
    }
    corners
}

/// Fraction of the axis-aligned `bbox` that lies inside a `width x height`
/// image whose origin is the top-left pixel.
pub fn overlap_ratio<T: Real>(bbox: &[T; 4], width: T, height: T) -> T {
    let [left, top, right, bottom] = *bbox;
    let area = (right - left) * (bottom - top);
    if area <= T::zero() {
        return T::zero();
    }
    let ix = right.min(width) - left.max(T::zero());
    let iy = bottom.min(height) - top.max(T::zero());
    if ix <= T::zero() || iy <= T::zero() {
        return T::zero();
    }
    (ix * iy) / area
}

/// Projects a box into the image: the axis-aligned hull of the projected
/// corners, kept only when every corner is in front of the camera and the
/// hull overlaps the image by at least [`MIN_IMAGE_OVERLAP`].
pub fn project_and_clip<T: Real>(bx: &OutputBox<T>, calib: &CameraCalib<T>) -> Option<[T; 4]> {
    let corners = box_corners(&bx.position, &bx.dims, bx.yaw);
    let mut left = T::max_value().unwrap();
    let mut top = T::max_value().unwrap();
    let mut right = -T::max_value().unwrap();
    let mut bottom = -T::max_value().unwrap();
    for c in &corners {
        let hom = calib.projection * Vector4::new(c.x, c.y, c.z, T::one());
        let depth = hom.z;
        if depth <= T::zero() {
            return None;
        }
        let u = hom.x / depth;
        let v = hom.y / depth;
        left = left.min(u);
        right = right.max(u);
        top = top.min(v);
        bottom = bottom.max(v);
    }
    let bbox = [left, top, right, bottom];
    let ratio = overlap_ratio(&bbox, calib.image_size[0], calib.image_size[1]);
    (ratio >= T::of(MIN_IMAGE_OVERLAP)).then_some(bbox)
}

/// Projects every box of the set, dropping boxes whose projection fails the
/// visibility filter. Boxes must already be in the camera frame.
pub fn apply_projection<T: Real>(set: TrackSet<T>, calib: &CameraCalib<T>) -> TrackSet<T> {
    let tracks = set
        .tracks
        .into_iter()
        .map(|t| OutputTrack {
            id: t.id,
            boxes: t
                .boxes
                .into_iter()
                .filter_map(|mut b| {
                    b.bbox2d = Some(project_and_clip(&b, calib)?);
                    Some(b)
                })
                .collect(),
        })
        .filter(|t: &OutputTrack<T>| !t.boxes.is_empty())
        .collect();
    TrackSet { tracks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{DimsYaw, ObjectState, TrackStatus};
    use approx::assert_relative_eq;

    fn det(frame: usize, conf: f64, dims: [f64; 3], yaw: f64) -> Detection<f64> {
        Detection {
            frame,
            position: Vector3::zeros(),
            dims,
            yaw,
            confidence: conf,
            class_id: 2,
            bbox2d: None,
        }
    }

    fn track_with(associations: Vec<Association>) -> Track<f64> {
        let n = associations.len();
        Track {
            id: 4,
            birth_frame: 0,
            states: vec![ObjectState::new(Vector3::zeros(), Vector3::zeros()); n],
            associations,
            dims_history: vec![
                DimsYaw {
                    dims: [0.0; 3],
                    yaw: 0.0
                };
                n
            ],
            confidence_history: vec![0.0; n],
            status: TrackStatus::Active,
            class_id: 2,
            confirmed: true,
            consecutive_detections: 1,
        }
    }

    #[test]
    fn attach_carries_dims_through_gap() {
        let mut dets = BTreeMap::new();
        dets.insert(0, vec![det(0, 4.0, [1.5, 1.6, 3.9], 0.3)]);
        dets.insert(2, vec![det(2, 5.0, [1.4, 1.7, 4.0], 0.4)]);
        let track = track_with(vec![
            Association::Detection(0),
            Association::Null,
            Association::Detection(0),
        ]);
        let boxes = attach_boxes(&track, &dets).unwrap();
        assert_eq!(boxes.len(), 3);
        assert_eq!(boxes[1].dims, [1.5, 1.6, 3.9]);
        assert_eq!(boxes[1].yaw, 0.3);
        assert_eq!(boxes[1].confidence, 0.0);
        assert_eq!(boxes[2].dims, [1.4, 1.7, 4.0]);
    }

    #[test]
    fn attach_copies_all_matched() {
        let mut dets = BTreeMap::new();
        for f in 0..3usize {
            dets.insert(f, vec![det(f, 4.0, [1.0 + f as f64, 1.6, 3.9], 0.0)]);
        }
        let track = track_with(vec![Association::Detection(0); 3]);
        let boxes = attach_boxes(&track, &dets).unwrap();
        for (f, b) in boxes.iter().enumerate() {
            assert_eq!(b.dims[0], 1.0 + f as f64);
        }
    }

    #[test]
    fn attach_two_frame_gap_repeats_carry() {
        let mut dets = BTreeMap::new();
        dets.insert(0, vec![det(0, 4.0, [1.5, 1.6, 3.9], 0.1)]);
        dets.insert(1, vec![det(1, 4.0, [1.5, 1.6, 3.9], 0.2)]);
        dets.insert(4, vec![det(4, 4.0, [1.5, 1.6, 3.9], 0.5)]);
        let track = track_with(vec![
            Association::Detection(0),
            Association::Detection(0),
            Association::Null,
            Association::Null,
            Association::Detection(0),
        ]);
        let boxes = attach_boxes(&track, &dets).unwrap();
        assert_eq!(boxes[2].yaw, 0.2);
        assert_eq!(boxes[3].yaw, 0.2);
        assert_eq!(boxes[2].confidence, 0.0);
        assert_eq!(boxes[3].confidence, 0.0);

        // Output length equals stored history length.
        assert_eq!(boxes.len(), track.len());
    }

    #[test]
    fn attach_rejects_null_at_birth() {
        let dets = BTreeMap::new();
        let track = track_with(vec![Association::Null]);
        assert!(attach_boxes(&track, &dets).is_err());
    }

    fn boxed_track(id: u64, confs: &[f64]) -> OutputTrack<f64> {
        OutputTrack {
            id,
            boxes: confs
                .iter()
                .enumerate()
                .map(|(f, c)| OutputBox {
                    frame: f,
                    track_id: id,
                    class_id: 2,
                    position: Vector3::zeros(),
                    dims: [1.5, 1.6, 3.9],
                    yaw: 0.0,
                    confidence: *c,
                    bbox2d: None,
                })
                .collect(),
        }
    }

    #[test]
    fn confidence_filter_examples() {
        let set = TrackSet {
            tracks: vec![boxed_track(1, &[4.0, 4.0, 4.0]), boxed_track(2, &[4.0, 0.0, 4.0])],
        };
        let kept = mean_confidence_filter(set, 3.9);
        assert_eq!(kept.tracks.len(), 1);
        assert_eq!(kept.tracks[0].id, 1);

        let empty = mean_confidence_filter(TrackSet::default(), 3.9);
        assert!(empty.tracks.is_empty());
    }

    fn calib(f: f64, cx: f64, cy: f64, w: f64, h: f64) -> CameraCalib<f64> {
        CameraCalib {
            projection: Matrix3x4::new(
                f, 0.0, cx, 0.0, //
                0.0, f, cy, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ),
            image_size: [w, h],
        }
    }

    fn unit_box(position: Vector3<f64>) -> OutputBox<f64> {
        OutputBox {
            frame: 0,
            track_id: 1,
            class_id: 2,
            position,
            dims: [1.0, 1.0, 1.0],
            yaw: 0.0,
            confidence: 4.0,
            bbox2d: None,
        }
    }

    #[test]
    fn centered_cube_projects_symmetric_bbox() {
        let cal = calib(100.0, 320.0, 240.0, 640.0, 480.0);
        // Bottom-face center at y = +h/2 centers the cube on the axis.
        let bx = unit_box(Vector3::new(0.0, 0.5, 10.0));
        let bbox = project_and_clip(&bx, &cal).unwrap();
        assert_relative_eq!(bbox[0] + bbox[2], 2.0 * 320.0, epsilon = 1e-9);
        assert_relative_eq!(bbox[1] + bbox[3], 2.0 * 240.0, epsilon = 1e-9);
    }

    #[test]
    fn box_behind_camera_is_suppressed() {
        let cal = calib(100.0, 320.0, 240.0, 640.0, 480.0);
        let bx = unit_box(Vector3::new(0.0, 0.5, -10.0));
        assert!(project_and_clip(&bx, &cal).is_none());
    }

    #[test]
    fn visibility_threshold_cases() {
        // Principal point at the left edge; u = 10 * x at z = 10. A 2 m long
        // box projects to a 20 px wide bbox; shifting it left controls the
        // visible fraction analytically: right / (right - left).
        let cal = calib(100.0, 0.0, 240.0, 640.0, 480.0);
        let mut bx = unit_box(Vector3::new(-0.4, 0.5, 10.0));
        bx.dims = [1.0, 0.0001, 2.0];
        // Visible fraction 6 / 20 = 0.30.
        assert!(project_and_clip(&bx, &cal).is_some());
        bx.position.x = -0.6;
        // Visible fraction 4 / 20 = 0.20 < 0.25.
        assert!(project_and_clip(&bx, &cal).is_none());
    }

    #[test]
    fn pinhole_scale_consistency() {
        // Doubling the near-face depth of an axis-centered box halves the
        // bbox width and height exactly.
        let cal = calib(100.0, 320.0, 240.0, 640.0, 480.0);
        let (h, w, l) = (1.4, 1.7, 4.2);
        let z_near = 12.0;
        let mut bx = unit_box(Vector3::new(0.0, h / 2.0, z_near + w / 2.0));
        bx.dims = [h, w, l];
        let b1 = project_and_clip(&bx, &cal).unwrap();
        bx.position.z = 2.0 * z_near + w / 2.0;
        let b2 = project_and_clip(&bx, &cal).unwrap();
        let (w1, h1) = (b1[2] - b1[0], b1[3] - b1[1]);
        let (w2, h2) = (b2[2] - b2[0], b2[3] - b2[1]);
        assert_relative_eq!(w2, w1 / 2.0, max_relative = 1e-9);
        assert_relative_eq!(h2, h1 / 2.0, max_relative = 1e-9);
    }

    #[test]
    fn overlap_monotone_under_inward_translation() {
        // Translating a bbox toward the image interior never decreases the
        // overlap ratio.
        let (w, h) = (640.0, 480.0);
        let mut rng_state = 123456789u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64) / (u32::MAX as f64)
        };
        for _ in 0..500 {
            let bw = 10.0 + 200.0 * next();
            let bh = 10.0 + 200.0 * next();
            let left = -300.0 + 900.0 * next();
            let top = -300.0 + 700.0 * next();
            let bbox = [left, top, left + bw, top + bh];
            let r0 = overlap_ratio(&bbox, w, h);

            // Move the bbox center a random fraction toward the image center.
            let (cx, cy) = (left + bw / 2.0, top + bh / 2.0);
            let frac = next();
            let dx = (w / 2.0 - cx) * frac;
            let dy = (h / 2.0 - cy) * frac;
            let moved = [left + dx, top + dy, left + bw + dx, top + bh + dy];
            let r1 = overlap_ratio(&moved, w, h);
            assert!(
                r1 >= r0 - 1e-12,
                "ratio decreased from {r0} to {r1} for {bbox:?} -> {moved:?}"
            );
        }
    }
}
