//! Oriented 3D boxes from instance point tracks: L-shape fitting, the static
//! aggregation path, the anchored dynamic path and trajectory smoothing.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::completion::{fps, Completer};
use crate::dbscan::{dbscan, largest_cluster};
use crate::error::{Error, Result};
use crate::geometry::{centroid, median, rigid_inverse, transform_point, wrap_angle, yaw_of, Point};
use crate::kalman::{smooth_cv, KalmanParams};
use crate::scene::SceneBundle;
use crate::segmentation::{DbscanParams, LabeledPointSet};

/// Oriented box; `dims = [length, width, height]` with length ≥ width and
/// heading (yaw of the length axis) in [−π, π).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point,
    pub dims: [f64; 3],
    pub heading: f64,
}

impl Box3D {
    /// Builds a box, swapping length/width (and turning the heading by π/2)
    /// when needed.
    pub fn new(center: Point, dims: [f64; 3], heading: f64) -> Self {
        let (dims, heading) = if dims[1] > dims[0] {
            ([dims[1], dims[0], dims[2]], heading + FRAC_PI_2)
        } else {
            (dims, heading)
        };
        Self {
            center,
            dims,
            heading: wrap_angle(heading),
        }
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    /// Point in box coordinates (x along length, y along width).
    pub fn to_local(&self, p: &Point) -> Vector3<f64> {
        let d = p - self.center;
        let (s, c) = self.heading.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Containment with every dimension scaled by `1 + inflate`.
    pub fn contains(&self, p: &Point, inflate: f64) -> bool {
        let l = self.to_local(p);
        let k = 0.5 * (1.0 + inflate);
        l.x.abs() <= self.dims[0] * k && l.y.abs() <= self.dims[1] * k && l.z.abs() <= self.dims[2] * k
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (0.5 * self.dims[0], 0.5 * self.dims[1]);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(a, b)| [self.center.x + c * a - s * b, self.center.y + s * a + c * b])
    }

    /// Box under a rigid transform whose rotation is a yaw.
    pub fn transformed(&self, t: &Matrix4<f64>) -> Self {
        Self {
            center: transform_point(t, &self.center),
            dims: self.dims,
            heading: wrap_angle(self.heading + yaw_of(t)),
        }
    }
}

/// Result of a BEV rectangle fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LShapeFit {
    /// Angle of the first rectangle axis, in [0, π/2).
    pub angle: f64,
    pub center: [f64; 2],
    /// Extents along the first and second axis.
    pub extent: [f64; 2],
    pub score: f64,
}

impl LShapeFit {
    /// Box with the given vertical range.
    pub fn to_box(&self, z_min: f64, z_max: f64) -> Box3D {
        Box3D::new(
            Point::new(self.center[0], self.center[1], 0.5 * (z_min + z_max)),
            [self.extent[0], self.extent[1], (z_max - z_min).max(1e-3)],
            self.angle,
        )
    }
}

const CLOSENESS_D0: f64 = 0.01;
const COARSE_STEP_DEG: f64 = 1.0;
const FINE_STEP_DEG: f64 = 0.02;

/// Closeness criterion: each point scores the inverse distance to the nearer
/// of the two rectangle edges it is closest to, clamped at `d0`.
fn closeness(points: &[[f64; 2]], angle: f64) -> (f64, [f64; 4]) {
    let (s, c) = angle.sin_cos();
    let mut c1 = Vec::with_capacity(points.len());
    let mut c2 = Vec::with_capacity(points.len());
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in points {
        let a = c * p[0] + s * p[1];
        let d = -s * p[0] + c * p[1];
        b[0] = b[0].min(a);
        b[1] = b[1].max(a);
        b[2] = b[2].min(d);
        b[3] = b[3].max(d);
        c1.push(a);
        c2.push(d);
    }
    // pick, per axis, the edge the points are collectively nearer to
    let near = |v: &[f64], lo: f64, hi: f64| {
        let to_lo: f64 = v.iter().map(|x| (x - lo) * (x - lo)).sum();
        let to_hi: f64 = v.iter().map(|x| (hi - x) * (hi - x)).sum();
        if to_lo <= to_hi {
            (lo, 1.0)
        } else {
            (hi, -1.0)
        }
    };
    let (e1, s1) = near(&c1, b[0], b[1]);
    let (e2, s2) = near(&c2, b[2], b[3]);
    let score = c1
        .iter()
        .zip(&c2)
        .map(|(a, d)| {
            let d1 = s1 * (a - e1);
            let d2 = s2 * (d - e2);
            1.0 / d1.min(d2).max(CLOSENESS_D0)
        })
        .sum();
    (score, b)
}

fn better(score: f64, area: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((bs, ba)) => {
            let tol = 1e-12 * bs.abs().max(1.0);
            score > bs + tol || ((score - bs).abs() <= tol && area < ba)
        }
    }
}

/// L-shape rectangle fit by closeness over headings in [0, π/2).
///
/// A 1° sweep locates the peak, then a 0.02° sweep within ±1° refines it.
/// Equal scores prefer the smaller rectangle.
pub fn l_shape_fit(points: &[[f64; 2]]) -> Result<LShapeFit> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "L-shape fit needs 3 points, got {}",
            points.len()
        )));
    }
    if collinear(points) {
        return Err(Error::Degenerate("L-shape fit on collinear points".into()));
    }
    let eval = |angle: f64| {
        let (score, b) = closeness(points, angle);
        (score, (b[1] - b[0]) * (b[3] - b[2]), b)
    };
    let mut best: Option<(f64, f64)> = None;
    let mut best_angle = 0.0;
    let steps = (90.0 / COARSE_STEP_DEG) as i32;
    for k in 0..steps {
        let a = (k as f64 * COARSE_STEP_DEG).to_radians();
        let (s, area, _) = eval(a);
        if better(s, area, best) {
            best = Some((s, area));
            best_angle = k as f64 * COARSE_STEP_DEG;
        }
    }
    let coarse = best_angle;
    let fine = (COARSE_STEP_DEG / FINE_STEP_DEG).round() as i32;
    for k in -fine..=fine {
        let deg = coarse + k as f64 * FINE_STEP_DEG;
        let (s, area, _) = eval(deg.to_radians());
        if better(s, area, best) {
            best = Some((s, area));
            best_angle = deg;
        }
    }
    let angle = best_angle.to_radians().rem_euclid(FRAC_PI_2);
    let (score, _, b) = eval(angle);
    let (cm, dm) = (0.5 * (b[0] + b[1]), 0.5 * (b[2] + b[3]));
    let (s, c) = angle.sin_cos();
    Ok(LShapeFit {
        angle,
        center: [c * cm - s * dm, s * cm + c * dm],
        extent: [b[1] - b[0], b[3] - b[2]],
        score,
    })
}

fn collinear(points: &[[f64; 2]]) -> bool {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    tr <= 0.0 || det <= 1e-12 * tr * tr
}

/// Box around 3D points: BEV L-shape fit plus the vertical extent.
pub fn fit_box(points: &[Point]) -> Result<Box3D> {
    let bev: Vec<[f64; 2]> = points.iter().map(|p| [p.x, p.y]).collect();
    let fit = l_shape_fit(&bev)?;
    let (zmin, zmax) = z_range(points);
    Ok(fit.to_box(zmin, zmax))
}

fn z_range(points: &[Point]) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.z), hi.max(p.z))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionState {
    Static,
    Dynamic,
}

impl MotionState {
    pub fn as_str(&self) -> &'static str {
        match self {
            MotionState::Static => "static",
            MotionState::Dynamic => "dynamic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoxParams {
    /// Minimum global centroid drift for a dynamic track, m.
    pub motion_threshold: f64,
    /// Drift allowance per second of track duration, m/s.
    pub motion_rate: f64,
    /// FPS sample size for fits.
    pub n_fit: usize,
    /// Box inflation for outlier removal after the initial static fit.
    pub inflate: f64,
    /// Heading search half-width for anchored refits, degrees.
    pub heading_window_deg: f64,
    /// Frames with fewer points get no measured box.
    pub min_points: usize,
    pub kalman: KalmanParams,
    /// Max heading residual (rad) for the linear heading fit to be used.
    pub heading_gate: f64,
    /// Length/width ratio below which heading follows the trajectory.
    pub square_ratio: f64,
    /// Clustering used to seed the static fit.
    pub cluster: DbscanParams,
}

impl Default for BoxParams {
    fn default() -> Self {
        Self {
            motion_threshold: 1.0,
            motion_rate: 0.02,
            n_fit: 4096,
            inflate: 0.1,
            heading_window_deg: 15.0,
            min_points: 3,
            kalman: KalmanParams::default(),
            heading_gate: 0.1,
            square_ratio: 1.2,
            cluster: DbscanParams::default(),
        }
    }
}

/// Pose and timestamp per frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Timeline {
    frames: BTreeMap<u32, (Matrix4<f64>, f64)>,
}

impl Timeline {
    pub fn new(entries: impl IntoIterator<Item = (u32, Matrix4<f64>, f64)>) -> Self {
        Self {
            frames: entries.into_iter().map(|(f, p, t)| (f, (p, t))).collect(),
        }
    }

    pub fn from_bundle(bundle: &SceneBundle) -> Result<Self> {
        let mut frames = BTreeMap::new();
        for f in &bundle.frames {
            let pose = bundle
                .pose(f.frame_index)
                .ok_or_else(|| Error::InvalidInput(format!("no pose for frame {}", f.frame_index)))?;
            frames.insert(f.frame_index, (pose.transform, f.timestamp));
        }
        Ok(Self { frames })
    }

    pub fn pose(&self, frame: u32) -> Result<&Matrix4<f64>> {
        self.frames
            .get(&frame)
            .map(|e| &e.0)
            .ok_or_else(|| Error::InvalidInput(format!("no pose for frame {frame}")))
    }

    pub fn timestamp(&self, frame: u32) -> Result<f64> {
        self.frames
            .get(&frame)
            .map(|e| e.1)
            .ok_or_else(|| Error::InvalidInput(format!("no timestamp for frame {frame}")))
    }

    /// Frame indices in `[first, last]`.
    pub fn span(&self, first: u32, last: u32) -> Vec<u32> {
        self.frames.range(first..=last).map(|(f, _)| *f).collect()
    }

    /// Same timeline with every pose premultiplied by `g`.
    pub fn transformed(&self, g: &Matrix4<f64>) -> Self {
        Self {
            frames: self.frames.iter().map(|(f, (p, t))| (*f, (g * p, *t))).collect(),
        }
    }
}

/// One instance's points per frame, in each frame's LiDAR coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTrack {
    pub instance_id: u32,
    pub semantic_id: u16,
    pub category: String,
    /// Sorted by frame index; frames without points may be absent.
    pub observations: Vec<(u32, Vec<Point>)>,
}

/// Groups labeled points into per-instance tracks.
pub fn collect_tracks(
    frames: &[(u32, &[Point])],
    labels: &[LabeledPointSet],
    vocabulary: &[String],
) -> Vec<InstanceTrack> {
    let mut tracks: BTreeMap<u32, InstanceTrack> = BTreeMap::new();
    for ((frame, points), set) in frames.iter().zip(labels) {
        for (id, idx) in set.instances() {
            let semantic_id = set.labels[idx[0]].semantic_id.unwrap_or(0);
            let t = tracks.entry(id).or_insert_with(|| InstanceTrack {
                instance_id: id,
                semantic_id,
                category: vocabulary.get(semantic_id as usize).cloned().unwrap_or_default(),
                observations: Vec::new(),
            });
            t.observations.push((*frame, idx.iter().map(|&i| points[i]).collect()));
        }
    }
    let mut out: Vec<InstanceTrack> = tracks.into_values().collect();
    for t in &mut out {
        t.observations.sort_by_key(|o| o.0);
    }
    out
}

fn global_centroids(track: &InstanceTrack, timeline: &Timeline) -> Result<Vec<(u32, Point)>> {
    let mut out = Vec::new();
    for (f, pts) in &track.observations {
        if let Some(c) = centroid(pts) {
            out.push((*f, transform_point(timeline.pose(*f)?, &c)));
        }
    }
    Ok(out)
}

/// Static unless the global centroid drifts by more than
/// `max(motion_threshold, motion_rate·duration)`. Tracks seen in fewer than
/// two frames are static.
pub fn classify_motion(track: &InstanceTrack, timeline: &Timeline, params: &BoxParams) -> Result<MotionState> {
    let cs = global_centroids(track, timeline)?;
    if cs.len() < 2 {
        return Ok(MotionState::Static);
    }
    let mut drift = 0.0f64;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            drift = drift.max((cs[i].1 - cs[j].1).norm());
        }
    }
    let duration = timeline.timestamp(cs[cs.len() - 1].0)? - timeline.timestamp(cs[0].0)?;
    let limit = params.motion_threshold.max(params.motion_rate * duration);
    Ok(if drift > limit {
        MotionState::Dynamic
    } else {
        MotionState::Static
    })
}

fn subsample(points: &[Point], n: usize) -> Vec<Point> {
    if points.len() <= n {
        return points.to_vec();
    }
    fps(points, n, 0)
        .expect("n < len")
        .into_iter()
        .map(|i| points[i])
        .collect()
}

fn complete(points: Vec<Point>, category: &str, completer: Option<&dyn Completer>) -> Result<Vec<Point>> {
    match completer {
        Some(c) if !points.is_empty() => c.complete(&points, category),
        _ => Ok(points),
    }
}

/// A box for one frame, in that frame's LiDAR coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameBox {
    pub frame_index: u32,
    pub bbox: Box3D,
    /// True when no measurement supported this frame's box.
    pub interpolated: bool,
}

/// Single global box from all frames, re-expressed in every frame of the
/// track's span. Returns the global box and the per-frame boxes.
pub fn fit_static(
    track: &InstanceTrack,
    timeline: &Timeline,
    completer: Option<&dyn Completer>,
    params: &BoxParams,
) -> Result<(Box3D, Vec<FrameBox>)> {
    let mut agg = Vec::new();
    for (f, pts) in &track.observations {
        let pose = timeline.pose(*f)?;
        agg.extend(pts.iter().map(|p| transform_point(pose, p)));
    }
    if agg.is_empty() {
        return Err(Error::Degenerate(format!(
            "instance {} has no points",
            track.instance_id
        )));
    }
    let agg = complete(agg, &track.category, completer)?;

    // the seed clustering runs on an even stride of the aggregate to bound its cost
    let stride = agg.len().div_ceil(params.n_fit.max(1)).max(1);
    let coarse: Vec<Point> = agg.iter().step_by(stride).copied().collect();
    let labels = dbscan(&coarse, params.cluster.eps, params.cluster.min_pts);
    let seed: Vec<Point> = match largest_cluster(&labels) {
        Some(c) => coarse
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == c)
            .map(|(p, _)| *p)
            .collect(),
        None => coarse,
    };
    let initial = fit_box(&seed)
        .or_else(|_| fit_box(&agg))
        .or_else(|_| Ok::<_, Error>(point_box(&agg)))?;
    let inside: Vec<Point> = agg
        .iter()
        .filter(|p| initial.contains(p, params.inflate))
        .copied()
        .collect();
    let sample = subsample(if inside.len() >= 3 { &inside } else { &agg }, params.n_fit);
    let global = fit_box(&sample).unwrap_or(initial);

    let (first, last) = span_of(track);
    let boxes = timeline
        .span(first, last)
        .into_iter()
        .map(|f| {
            Ok(FrameBox {
                frame_index: f,
                bbox: global.transformed(&rigid_inverse(timeline.pose(f)?)),
                interpolated: !track.observations.iter().any(|o| o.0 == f && !o.1.is_empty()),
            })
        })
        .collect::<Result<_>>()?;
    Ok((global, boxes))
}

/// Axis-aligned fallback for inputs an L-shape cannot fit (e.g. one point).
fn point_box(points: &[Point]) -> Box3D {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let c = nalgebra::center(&lo, &hi);
    let d = hi - lo;
    Box3D::new(c, [d.x.max(0.1), d.y.max(0.1), d.z.max(0.1)], 0.0)
}

fn span_of(track: &InstanceTrack) -> (u32, u32) {
    let first = track.observations.first().map(|o| o.0).unwrap_or(0);
    let last = track.observations.last().map(|o| o.0).unwrap_or(0);
    (first, last)
}

/// Per-frame box measurements of a dynamic track, before smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFit {
    pub anchor: [f64; 3],
    /// Initial (un-anchored) per-frame fits.
    pub initial: BTreeMap<u32, Box3D>,
    /// Anchored per-frame fits, LiDAR frame.
    pub refined: BTreeMap<u32, Box3D>,
}

/// Frame-by-frame fits stabilized by a per-track anchor (median dims).
///
/// The refit keeps the anchor dims, searches heading within ±window of the
/// initial estimate (on the axis family closest to the direction of travel)
/// and places the box against the edges nearest the sensor.
pub fn fit_dynamic(
    track: &InstanceTrack,
    timeline: &Timeline,
    completer: Option<&dyn Completer>,
    params: &BoxParams,
) -> Result<DynamicFit> {
    let cs = global_centroids(track, timeline)?;
    let travel = match (cs.first(), cs.last()) {
        (Some(a), Some(b)) if (b.1 - a.1).xy().norm() > 1e-9 => Some((b.1.y - a.1.y).atan2(b.1.x - a.1.x)),
        _ => None,
    };

    let mut initial = BTreeMap::new();
    let mut frame_points = BTreeMap::new();
    for (f, pts) in &track.observations {
        if pts.len() < params.min_points.max(3) {
            continue;
        }
        let pts = complete(pts.clone(), &track.category, completer)?;
        let sample = subsample(&pts, params.n_fit);
        // one visible face is collinear in BEV; fall back like the static path
        let b = fit_box(&sample).unwrap_or_else(|_| point_box(&sample));
        initial.insert(*f, b);
        frame_points.insert(*f, sample);
    }
    if initial.is_empty() {
        return Err(Error::Degenerate(format!(
            "instance {} has no frame with {} fit-able points",
            track.instance_id, params.min_points
        )));
    }
    let mut ls: Vec<f64> = initial.values().map(|b| b.dims[0]).collect();
    let mut ws: Vec<f64> = initial.values().map(|b| b.dims[1]).collect();
    let mut hs: Vec<f64> = initial.values().map(|b| b.dims[2]).collect();
    let anchor = [
        median(&mut ls).unwrap(),
        median(&mut ws).unwrap(),
        median(&mut hs).unwrap(),
    ];

    let mut refined = BTreeMap::new();
    for (f, init) in &initial {
        let pose = timeline.pose(*f)?;
        let travel_local = travel.map(|t| wrap_angle(t - yaw_of(pose)));
        let pts = &frame_points[f];
        let base = match travel_local {
            Some(t) => {
                let d0 = angle_dist_mod_pi(init.heading, t);
                let d1 = angle_dist_mod_pi(init.heading + FRAC_PI_2, t);
                if d1 < d0 {
                    init.heading + FRAC_PI_2
                } else {
                    init.heading
                }
            }
            None => init.heading,
        };
        let mut b = anchored_fit(pts, base, anchor, params.heading_window_deg);
        if let Some(t) = travel_local {
            if angle_dist(b.heading, t) > FRAC_PI_2 {
                b.heading = wrap_angle(b.heading + PI);
            }
        }
        refined.insert(*f, b);
    }
    Ok(DynamicFit {
        anchor,
        initial,
        refined,
    })
}

fn angle_dist(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

fn angle_dist_mod_pi(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Fixed-dims refit: heading search around `base`; the box is placed against
/// the rectangle edges nearest the sensor (LiDAR origin).
fn anchored_fit(points: &[Point], base: f64, dims: [f64; 3], window_deg: f64) -> Box3D {
    let eval = |heading: f64| {
        let (s, c) = heading.sin_cos();
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        let proj: Vec<(f64, f64)> = points
            .iter()
            .map(|p| {
                let a = c * p.x + s * p.y;
                let d = -s * p.x + c * p.y;
                b[0] = b[0].min(a);
                b[1] = b[1].max(a);
                b[2] = b[2].min(d);
                b[3] = b[3].max(d);
                (a, d)
            })
            .collect();
        // sensor at the origin has coordinate 0 on both axes
        let (a_lo, a_hi) = if 0.0 <= 0.5 * (b[0] + b[1]) {
            (b[0], b[0] + dims[0])
        } else {
            (b[1] - dims[0], b[1])
        };
        let (d_lo, d_hi) = if 0.0 <= 0.5 * (b[2] + b[3]) {
            (b[2], b[2] + dims[1])
        } else {
            (b[3] - dims[1], b[3])
        };
        let a_edge = if 0.0 <= 0.5 * (b[0] + b[1]) { a_lo } else { a_hi };
        let d_edge = if 0.0 <= 0.5 * (b[2] + b[3]) { d_lo } else { d_hi };
        let score: f64 = proj
            .iter()
            .map(|(a, d)| 1.0 / (a - a_edge).abs().min((d - d_edge).abs()).max(CLOSENESS_D0))
            .sum();
        let (cm, dm) = (0.5 * (a_lo + a_hi), 0.5 * (d_lo + d_hi));
        let center = [c * cm - s * dm, s * cm + c * dm];
        (score, center)
    };
    let mut best: Option<(f64, f64)> = None;
    let mut best_h = base;
    let mut best_c = [0.0, 0.0];
    let mut sweep = |center_deg: f64, half: f64, step: f64, best_h: &mut f64| {
        let k = (half / step).round() as i32;
        for i in -k..=k {
            let h = (center_deg + i as f64 * step).to_radians();
            let (s, c) = eval(h);
            if better(s, 0.0, best) {
                best = Some((s, 0.0));
                *best_h = h;
                best_c = c;
            }
        }
    };
    let base_deg = base.to_degrees();
    sweep(base_deg, window_deg, COARSE_STEP_DEG, &mut best_h);
    let coarse = best_h.to_degrees();
    sweep(coarse, COARSE_STEP_DEG, FINE_STEP_DEG, &mut best_h);
    let (zmin, _) = z_range(points);
    Box3D {
        center: Point::new(best_c[0], best_c[1], zmin + 0.5 * dims[2]),
        dims,
        heading: wrap_angle(best_h),
    }
}

/// Smooths global-frame boxes over time: centers by a constant-velocity
/// Kalman/RTS smoother, heading by a gated linear fit. Missing frames are
/// filled. Footprints with `length/width < square_ratio` take the direction
/// of travel as heading when moving.
pub fn smooth_trajectory(times: &[f64], boxes: &[Option<Box3D>], params: &BoxParams) -> Result<Vec<Box3D>> {
    assert_eq!(times.len(), boxes.len());
    let obs: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].is_some()).collect();
    if obs.is_empty() {
        return Err(Error::Degenerate("no boxes to smooth".into()));
    }
    let centers: Vec<Option<Vector3<f64>>> = boxes.iter().map(|b| b.map(|b| b.center.coords)).collect();
    let states = smooth_cv(times, &centers, &params.kalman);

    let mut ls: Vec<f64> = obs.iter().map(|&i| boxes[i].unwrap().dims[0]).collect();
    let mut ws: Vec<f64> = obs.iter().map(|&i| boxes[i].unwrap().dims[1]).collect();
    let mut hs: Vec<f64> = obs.iter().map(|&i| boxes[i].unwrap().dims[2]).collect();
    let dims = [
        median(&mut ls).unwrap(),
        median(&mut ws).unwrap(),
        median(&mut hs).unwrap(),
    ];

    // unwrap observed headings
    let mut unwrapped: Vec<(f64, f64)> = Vec::with_capacity(obs.len());
    for &i in &obs {
        let h = boxes[i].unwrap().heading;
        let h = match unwrapped.last() {
            Some(&(_, prev)) => prev + wrap_angle(h - prev),
            None => h,
        };
        unwrapped.push((times[i], h));
    }
    let headings = fit_headings(times, &unwrapped, params.heading_gate);

    let square = dims[0] / dims[1] < params.square_ratio;
    Ok((0..times.len())
        .map(|i| {
            let v = states[i].velocity;
            let heading = if square && v.xy().norm() > 0.1 {
                v.y.atan2(v.x)
            } else {
                headings[i]
            };
            Box3D {
                center: Point::from(states[i].position),
                dims,
                heading: wrap_angle(heading),
            }
        })
        .collect())
}

/// Least-squares line through (t, heading) if every residual is within the
/// gate; otherwise the observations, with gaps linearly interpolated.
fn fit_headings(times: &[f64], obs: &[(f64, f64)], gate: f64) -> Vec<f64> {
    let n = obs.len() as f64;
    let tm = obs.iter().map(|o| o.0).sum::<f64>() / n;
    let hm = obs.iter().map(|o| o.1).sum::<f64>() / n;
    let sxx: f64 = obs.iter().map(|o| (o.0 - tm) * (o.0 - tm)).sum();
    let sxy: f64 = obs.iter().map(|o| (o.0 - tm) * (o.1 - hm)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let line = |t: f64| hm + slope * (t - tm);
    if obs.iter().all(|o| (o.1 - line(o.0)).abs() <= gate) {
        return times.iter().map(|&t| line(t)).collect();
    }
    times
        .iter()
        .map(|&t| {
            let j = obs.partition_point(|o| o.0 < t);
            if j < obs.len() && obs[j].0 == t {
                obs[j].1
            } else if j == 0 {
                obs[0].1
            } else if j == obs.len() {
                obs[obs.len() - 1].1
            } else {
                let (a, b) = (obs[j - 1], obs[j]);
                a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
            }
        })
        .collect()
}

/// Interpreted track: motion state and per-frame boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub instance_id: u32,
    pub semantic_id: u16,
    pub category: String,
    pub motion: MotionState,
    pub boxes: Vec<FrameBox>,
    /// Global box centers per frame.
    pub trajectory: Vec<(u32, Point)>,
}

/// Classifies the track and runs the matching path.
pub fn interpret_track(
    track: &InstanceTrack,
    timeline: &Timeline,
    completer: Option<&dyn Completer>,
    params: &BoxParams,
) -> Result<ObjectTrack> {
    let motion = classify_motion(track, timeline, params)?;
    let boxes = match motion {
        MotionState::Static => fit_static(track, timeline, completer, params)?.1,
        MotionState::Dynamic => {
            let fit = fit_dynamic(track, timeline, completer, params)?;
            let (first, last) = span_of(track);
            let frames = timeline.span(first, last);
            let times = frames
                .iter()
                .map(|&f| timeline.timestamp(f))
                .collect::<Result<Vec<_>>>()?;
            let mut global = Vec::with_capacity(frames.len());
            for f in &frames {
                global.push(match fit.refined.get(f) {
                    Some(b) => Some(b.transformed(timeline.pose(*f)?)),
                    None => None,
                });
            }
            let smoothed = match global.iter().flatten().count() {
                0 | 1 => {
                    let only = *global.iter().flatten().next().expect("fit_dynamic yields a box");
                    vec![only; frames.len()]
                }
                _ => smooth_trajectory(&times, &global, params)?,
            };
            frames
                .iter()
                .zip(smoothed)
                .map(|(f, g)| {
                    Ok(FrameBox {
                        frame_index: *f,
                        bbox: g.transformed(&rigid_inverse(timeline.pose(*f)?)),
                        interpolated: !fit.refined.contains_key(f),
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let trajectory = boxes
        .iter()
        .map(|b| {
            Ok((
                b.frame_index,
                transform_point(timeline.pose(b.frame_index)?, &b.bbox.center),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(ObjectTrack {
        instance_id: track.instance_id,
        semantic_id: track.semantic_id,
        category: track.category.clone(),
        motion,
        boxes,
        trajectory,
    })
}
