//! Shared domain types for a recorded scene and their invariants.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::geometry::{orthonormality_error, Point};

const ROTATION_TOL: f64 = 1e-6;
const UNIT_TOL: f64 = 1e-6;

/// One LiDAR sweep, points expressed in the LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub frame_index: u32,
    pub timestamp: f64,
    pub points: Vec<Point>,
    pub intensity: Option<Vec<f32>>,
}

/// Pinhole camera with LiDAR→camera extrinsics. No distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub view_id: String,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Position of this view in the left-to-right panorama.
    pub panoramic_index: usize,
}

/// LiDAR frame → global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoPose {
    pub frame_index: u32,
    pub transform: Matrix4<f64>,
}

/// A 2D instance (or stuff) mask of one view at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTrack2D {
    pub view_id: String,
    pub frame_index: u32,
    /// Value `k` of this mask in the on-disk index map.
    pub mask_index: u16,
    /// Per-view tracking id; `None` for background stuff.
    pub instance_id: Option<u32>,
    pub category: String,
    /// Covered pixels as `[u, v]`, sorted row-major.
    pub pixels: Vec<[u32; 2]>,
    /// `(u_min, v_min, u_max, v_max)` in pixel-edge coordinates.
    pub box2d: [f64; 4],
    pub appearance: Vec<f64>,
    pub confidence: f64,
}

impl MaskTrack2D {
    pub fn is_thing(&self) -> bool {
        self.instance_id.is_some()
    }

    /// Tight pixel-edge bounds of the covered pixels.
    pub fn pixel_bounds(&self) -> Option<[f64; 4]> {
        let mut it = self.pixels.iter();
        let first = it.next()?;
        let mut b = [first[0], first[1], first[0], first[1]];
        for p in it {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        Some([b[0] as f64, b[1] as f64, b[2] as f64 + 1.0, b[3] as f64 + 1.0])
    }

    pub fn box_center_u(&self) -> f64 {
        0.5 * (self.box2d[0] + self.box2d[2])
    }
}

/// Everything the pipeline consumes for one sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneBundle {
    pub frames: Vec<PointCloudFrame>,
    pub calibrations: Vec<CameraCalibration>,
    pub poses: Vec<EgoPose>,
    pub mask_tracks: Vec<MaskTrack2D>,
    pub vocabulary: Vec<String>,
}

impl SceneBundle {
    pub fn calibration(&self, view_id: &str) -> Option<&CameraCalibration> {
        self.calibrations.iter().find(|c| c.view_id == view_id)
    }

    pub fn pose(&self, frame_index: u32) -> Option<&EgoPose> {
        self.poses.iter().find(|p| p.frame_index == frame_index)
    }

    pub fn frame(&self, frame_index: u32) -> Option<&PointCloudFrame> {
        self.frames.iter().find(|f| f.frame_index == frame_index)
    }

    pub fn semantic_id(&self, category: &str) -> Option<u16> {
        self.vocabulary.iter().position(|c| c == category).map(|i| i as u16)
    }

    /// Masks grouped by frame index, in bundle order.
    pub fn masks_by_frame(&self) -> BTreeMap<u32, Vec<&MaskTrack2D>> {
        let mut out: BTreeMap<u32, Vec<&MaskTrack2D>> = BTreeMap::new();
        for m in &self.mask_tracks {
            out.entry(m.frame_index).or_default().push(m);
        }
        out
    }

    /// Calibrations sorted by panoramic index.
    pub fn panoramic_views(&self) -> Vec<&CameraCalibration> {
        let mut v: Vec<_> = self.calibrations.iter().collect();
        v.sort_by_key(|c| c.panoramic_index);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DiagnosticKind {
    NonFinite,
    TimestampOrder,
    DuplicateFrame,
    Rotation,
    Intrinsics,
    ImageSize,
    PanoramicIndex,
    Pose,
    MissingPose,
    MaskBounds,
    Appearance,
    Box2d,
    Confidence,
    UnknownView,
    UnknownFrame,
    UnknownCategory,
}

/// One invariant violation, naming the offending record.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({:?}): {}", self.location, self.kind, self.message)
    }
}

struct Diags(Vec<Diagnostic>);

impl Diags {
    fn push(&mut self, kind: DiagnosticKind, location: impl Into<String>, message: impl Into<String>) {
        self.0.push(Diagnostic {
            kind,
            location: location.into(),
            message: message.into(),
        });
    }
}

/// Checks every bundle invariant. Empty output means the bundle is valid.
pub fn validate_bundle(bundle: &SceneBundle) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut d = Diags(Vec::new());

    let mut seen_frames = BTreeSet::new();
    for (i, f) in bundle.frames.iter().enumerate() {
        let loc = format!("frame {}", f.frame_index);
        if !seen_frames.insert(f.frame_index) {
            d.push(DuplicateFrame, &loc, "frame index appears twice");
        }
        if !f.timestamp.is_finite() {
            d.push(NonFinite, &loc, "timestamp is not finite");
        }
        if let Some(bad) = f.points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            d.push(NonFinite, &loc, format!("point {bad} has a non-finite coordinate"));
        }
        if let Some(int) = &f.intensity {
            if int.len() != f.points.len() {
                d.push(NonFinite, &loc, "intensity length differs from point count");
            }
        }
        if i > 0 {
            let prev = &bundle.frames[i - 1];
            if !(f.timestamp > prev.timestamp) {
                d.push(
                    TimestampOrder,
                    &loc,
                    format!(
                        "timestamp {} does not exceed previous frame {} timestamp {}",
                        f.timestamp, prev.frame_index, prev.timestamp
                    ),
                );
            }
        }
    }

    let mut pano = Vec::new();
    let mut views = HashMap::new();
    for c in &bundle.calibrations {
        let loc = format!("calibration {}", c.view_id);
        views.insert(c.view_id.as_str(), c);
        let finite = c.rotation.iter().chain(c.translation.iter()).all(|v| v.is_finite())
            && [c.fx, c.fy, c.cx, c.cy].iter().all(|v| v.is_finite());
        if !finite {
            d.push(NonFinite, &loc, "non-finite calibration value");
        }
        let err = orthonormality_error(&c.rotation);
        if !(err < ROTATION_TOL) || !(c.rotation.determinant() > 0.0) {
            d.push(
                Rotation,
                &loc,
                format!(
                    "rotation not orthonormal with det +1 (|RᵀR−I|∞ = {err:.3e}, det = {:.6})",
                    c.rotation.determinant()
                ),
            );
        }
        if !(c.fx > 0.0 && c.fy > 0.0) {
            d.push(Intrinsics, &loc, "focal lengths must be positive");
        }
        if c.width == 0 || c.height == 0 {
            d.push(ImageSize, &loc, "image size must be positive");
        }
        pano.push(c.panoramic_index);
    }
    pano.sort_unstable();
    if pano.iter().enumerate().any(|(i, &p)| i != p) {
        d.push(
            PanoramicIndex,
            "calibrations",
            format!("panoramic indices {pano:?} are not a permutation of 0..{}", pano.len()),
        );
    }

    let mut posed = BTreeSet::new();
    for p in &bundle.poses {
        let loc = format!("pose {}", p.frame_index);
        posed.insert(p.frame_index);
        if !p.transform.iter().all(|v| v.is_finite()) {
            d.push(NonFinite, &loc, "non-finite pose");
            continue;
        }
        let r: Matrix3<f64> = p.transform.fixed_view::<3, 3>(0, 0).into_owned();
        if !(orthonormality_error(&r) < ROTATION_TOL) || !(r.determinant() > 0.0) {
            d.push(Pose, &loc, "rotation block not orthonormal");
        }
        let row = p.transform.row(3);
        if row[0] != 0.0 || row[1] != 0.0 || row[2] != 0.0 || row[3] != 1.0 {
            d.push(Pose, &loc, "bottom row must be exactly (0, 0, 0, 1)");
        }
        if !seen_frames.contains(&p.frame_index) {
            d.push(UnknownFrame, &loc, "pose has no matching point-cloud frame");
        }
    }
    for f in &bundle.frames {
        if !posed.contains(&f.frame_index) {
            d.push(MissingPose, format!("frame {}", f.frame_index), "frame has no pose");
        }
    }

    for m in &bundle.mask_tracks {
        let loc = format!("mask {}/{}#{}", m.view_id, m.frame_index, m.mask_index);
        if !seen_frames.contains(&m.frame_index) {
            d.push(UnknownFrame, &loc, "mask refers to a missing frame");
        }
        if !bundle.vocabulary.iter().any(|c| c == &m.category) {
            d.push(
                UnknownCategory,
                &loc,
                format!("category `{}` not in vocabulary", m.category),
            );
        }
        if !(0.0..=1.0).contains(&m.confidence) {
            d.push(Confidence, &loc, format!("confidence {} outside [0, 1]", m.confidence));
        }
        let norm = m.appearance.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOL) {
            d.push(Appearance, &loc, format!("appearance norm {norm} is not 1"));
        }
        match views.get(m.view_id.as_str()) {
            None => d.push(UnknownView, &loc, format!("no calibration for view `{}`", m.view_id)),
            Some(c) => {
                if let Some(p) = m.pixels.iter().find(|p| p[0] >= c.width || p[1] >= c.height) {
                    d.push(
                        MaskBounds,
                        &loc,
                        format!("pixel ({}, {}) outside {}x{} image", p[0], p[1], c.width, c.height),
                    );
                }
            }
        }
        if m.box2d != m.pixel_bounds().unwrap_or([0.0; 4]) {
            d.push(
                Box2d,
                &loc,
                format!(
                    "box {:?} does not tightly bound the mask {:?}",
                    m.box2d,
                    m.pixel_bounds()
                ),
            );
        }
    }

    d.0
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_bundle() -> SceneBundle {
        let calib = CameraCalibration {
            view_id: "front".into(),
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
            panoramic_index: 0,
        };
        let frames = (0..2)
            .map(|i| PointCloudFrame {
                frame_index: i,
                timestamp: i as f64 * 0.1,
                points: vec![Point::new(0.0, 0.0, 5.0)],
                intensity: None,
            })
            .collect();
        let poses = (0..2)
            .map(|i| EgoPose {
                frame_index: i,
                transform: Matrix4::identity(),
            })
            .collect();
        let mask = MaskTrack2D {
            view_id: "front".into(),
            frame_index: 0,
            mask_index: 1,
            instance_id: Some(7),
            category: "car".into(),
            pixels: vec![[3, 4], [4, 4], [3, 5]],
            box2d: [3.0, 4.0, 5.0, 6.0],
            appearance: vec![0.6, 0.8],
            confidence: 0.9,
        };
        SceneBundle {
            frames,
            calibrations: vec![calib],
            poses,
            mask_tracks: vec![mask],
            vocabulary: vec!["road".into(), "car".into()],
        }
    }

    #[test]
    fn well_formed_bundle_has_no_diagnostics() {
        assert!(validate_bundle(&tiny_bundle()).is_empty());
    }

    #[test]
    fn pixel_at_image_width_is_out_of_bounds() {
        let mut b = tiny_bundle();
        b.mask_tracks[0].pixels = vec![[64, 0]];
        b.mask_tracks[0].box2d = [64.0, 0.0, 65.0, 1.0];
        let d = validate_bundle(&b);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::MaskBounds);
    }

    #[test]
    fn swapped_timestamps_flagged_once() {
        let mut b = tiny_bundle();
        b.frames[0].timestamp = 0.1;
        b.frames[1].timestamp = 0.0;
        let d = validate_bundle(&b);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagnosticKind::TimestampOrder);
    }

    #[test]
    fn rotation_defect_detected() {
        let mut b = tiny_bundle();
        b.calibrations[0].rotation[(0, 1)] = 1e-3;
        let d = validate_bundle(&b);
        assert!(d.iter().any(|x| x.kind == DiagnosticKind::Rotation));
    }

    #[test]
    fn loose_box_and_bad_appearance() {
        let mut b = tiny_bundle();
        b.mask_tracks[0].box2d = [2.0, 4.0, 5.0, 6.0];
        b.mask_tracks[0].appearance = vec![1.0, 1.0];
        let kinds: Vec<_> = validate_bundle(&b).into_iter().map(|d| d.kind).collect();
        assert_eq!(kinds, vec![DiagnosticKind::Appearance, DiagnosticKind::Box2d]);
    }

    #[test]
    fn panoramic_indices_must_be_permutation() {
        let mut b = tiny_bundle();
        b.calibrations[0].panoramic_index = 1;
        let d = validate_bundle(&b);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::PanoramicIndex);
    }
}
