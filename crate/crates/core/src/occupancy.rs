//! Semantic/instance occupancy grids with flow, decoded from labeled points
//! and box tracks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::boxes::{Box3D, MotionState, ObjectTrack, Timeline};
use crate::error::{Error, Result};
use crate::geometry::{rigid_inverse, rotation_z, transform_point, wrap_angle, Point};
use crate::projection::{to_camera, to_pixel};
use crate::scene::CameraCalibration;
use crate::segmentation::LabeledPointSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Corner of voxel (0, 0, 0), LiDAR frame.
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [u32; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            origin: [-40.0, -40.0, -3.0],
            voxel_size: 0.4,
            dims: [200, 200, 16],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || !self.origin.iter().all(|o| o.is_finite()) {
            return Err(Error::Config(
                "grid voxel_size must be positive and origin finite".into(),
            ));
        }
        let cells = self.dims.iter().map(|&d| d as u64).product::<u64>();
        if cells == 0 || cells > u32::MAX as u64 {
            return Err(Error::Config(format!("grid dims {:?} out of range", self.dims)));
        }
        Ok(())
    }

    pub fn cell_of(&self, p: &Point) -> Option<[u32; 3]> {
        let mut c = [0u32; 3];
        for a in 0..3 {
            let k = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if k < 0.0 || k >= self.dims[a] as f64 {
                return None;
            }
            c[a] = k as u32;
        }
        Some(c)
    }

    pub fn linear(&self, c: [u32; 3]) -> u32 {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    pub fn cell(&self, idx: u32) -> [u32; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn center(&self, idx: u32) -> Point {
        let c = self.cell(idx);
        Point::new(
            self.origin[0] + (c[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (c[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (c[2] as f64 + 0.5) * self.voxel_size,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    pub semantic_id: u16,
    /// 0 = none.
    pub instance_id: u32,
    /// m/s, LiDAR axes of the grid's frame, ego motion removed.
    pub flow: [f32; 3],
}

/// Sparse grid: only occupied voxels are stored, keyed by linear index.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub frame_index: u32,
    pub voxels: BTreeMap<u32, Voxel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub point: Point,
    pub semantic_id: u16,
    /// 0 = none.
    pub instance_id: u32,
}

fn vote<K: Copy + Ord>(counts: &[(K, u32)]) -> Option<K> {
    // ties go to the smallest key
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|c| c.0)
}

fn bump<K: PartialEq>(counts: &mut Vec<(K, u32)>, key: K) {
    match counts.iter_mut().find(|c| c.0 == key) {
        Some(c) => c.1 += 1,
        None => counts.push((key, 1)),
    }
}

/// Voxels with at least `min_points` points are occupied; semantics and
/// instance by majority vote (instance among instance-labeled points only).
pub fn voxelize(points: &[LabeledPoint], spec: &GridSpec, frame_index: u32, min_points: usize) -> OccupancyGrid {
    #[derive(Default)]
    struct Acc {
        n: usize,
        sem: Vec<(u16, u32)>,
        inst: Vec<(u32, u32)>,
    }
    let mut acc: HashMap<u32, Acc> = HashMap::new();
    for p in points {
        let Some(c) = spec.cell_of(&p.point) else { continue };
        let a = acc.entry(spec.linear(c)).or_default();
        a.n += 1;
        bump(&mut a.sem, p.semantic_id);
        if p.instance_id != 0 {
            bump(&mut a.inst, p.instance_id);
        }
    }
    let voxels = acc
        .into_iter()
        .filter(|(_, a)| a.n >= min_points.max(1))
        .map(|(k, a)| {
            (
                k,
                Voxel {
                    semantic_id: vote(&a.sem).expect("non-empty"),
                    instance_id: vote(&a.inst).unwrap_or(0),
                    flow: [0.0; 3],
                },
            )
        })
        .collect();
    OccupancyGrid {
        spec: *spec,
        frame_index,
        voxels,
    }
}

/// Velocity at `p` of the rigid motion taking box `from` onto box `to`
/// over `dt`. `at_end` evaluates at the end pose (backward difference).
pub fn rigid_flow(from: &Box3D, to: &Box3D, dt: f64, p: &Point, at_end: bool) -> Vector3<f64> {
    let dtheta = wrap_angle(to.heading - from.heading);
    if at_end {
        let prev = rotation_z(-dtheta) * (p - to.center) + from.center.coords;
        (p.coords - prev) / dt
    } else {
        let next = rotation_z(dtheta) * (p - from.center) + to.center.coords;
        (next - p.coords) / dt
    }
}

pub(crate) fn near_box(b: &Box3D, p: &Point, margin: f64) -> bool {
    let l = b.to_local(p);
    l.x.abs() <= 0.5 * b.dims[0] + margin
        && l.y.abs() <= 0.5 * b.dims[1] + margin
        && l.z.abs() <= 0.5 * b.dims[2] + margin
}

/// Sets the flow of the voxels of each dynamic track: voxels carrying the
/// track's instance id that overlap its box in the grid's frame. Motion is
/// the finite difference to the next frame of the track (the previous one
/// at its last frame).
pub fn attach_flow(grid: &mut OccupancyGrid, tracks: &[ObjectTrack], timeline: &Timeline) -> Result<()> {
    let t = grid.frame_index;
    let pose_t = *timeline.pose(t)?;
    let inv_t = rigid_inverse(&pose_t);
    let margin = 0.5 * 3f64.sqrt() * grid.spec.voxel_size;
    for tr in tracks.iter().filter(|tr| tr.motion == MotionState::Dynamic) {
        let Some(k) = tr.boxes.iter().position(|b| b.frame_index == t) else {
            continue;
        };
        let (a, b, at_end) = if k + 1 < tr.boxes.len() {
            (&tr.boxes[k], &tr.boxes[k + 1], false)
        } else if k > 0 {
            (&tr.boxes[k - 1], &tr.boxes[k], true)
        } else {
            continue;
        };
        let dt = timeline.timestamp(b.frame_index)? - timeline.timestamp(a.frame_index)?;
        if !(dt > 0.0) {
            continue;
        }
        let in_t = |fb: &crate::boxes::FrameBox| -> Result<Box3D> {
            Ok(fb.bbox.transformed(&(inv_t * timeline.pose(fb.frame_index)?)))
        };
        let (ba, bb) = (in_t(a)?, in_t(b)?);
        let here = if at_end { &bb } else { &ba };
        for (&idx, v) in grid.voxels.iter_mut() {
            if v.instance_id != tr.instance_id {
                continue;
            }
            let c = grid.spec.center(idx);
            if near_box(here, &c, margin) {
                let f = rigid_flow(&ba, &bb, dt, &c, at_end);
                v.flow = [f.x as f32, f.y as f32, f.z as f32];
            }
        }
    }
    Ok(())
}

impl OccupancyGrid {
    /// Keeps voxels whose center projects into at least one camera.
    pub fn retain_in_fov(&mut self, calibs: &[CameraCalibration]) {
        let spec = self.spec;
        self.voxels.retain(|&idx, _| {
            calibs
                .iter()
                .any(|c| to_pixel(&to_camera(&spec.center(idx), c), c).is_some())
        });
    }

    pub fn class_counts(&self) -> BTreeMap<u16, usize> {
        let mut out = BTreeMap::new();
        for v in self.voxels.values() {
            *out.entry(v.semantic_id).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub semantic_id: u16,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    /// None when no class was evaluated.
    pub miou: Option<f64>,
}

impl MiouReport {
    /// Accumulates counts from several grids/frames and recomputes IoUs.
    pub fn merge(reports: &[MiouReport]) -> MiouReport {
        let mut acc: BTreeMap<u16, (u64, u64)> = BTreeMap::new();
        for r in reports {
            for c in &r.per_class {
                let e = acc.entry(c.semantic_id).or_insert((0, 0));
                e.0 += c.intersection;
                e.1 += c.union;
            }
        }
        from_counts(acc)
    }
}

fn from_counts(acc: BTreeMap<u16, (u64, u64)>) -> MiouReport {
    let per_class: Vec<ClassIou> = acc
        .into_iter()
        .filter(|(_, (_, u))| *u > 0)
        .map(|(c, (i, u))| ClassIou {
            semantic_id: c,
            iou: i as f64 / u as f64,
            intersection: i,
            union: u,
        })
        .collect();
    let miou = (!per_class.is_empty()).then(|| per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64);
    MiouReport { per_class, miou }
}

/// Per-class voxel IoU. An empty `classes` list evaluates every class
/// present in either grid; classes absent from both are skipped.
pub fn occupancy_miou(pred: &OccupancyGrid, truth: &OccupancyGrid, classes: &[u16]) -> Result<MiouReport> {
    if pred.spec != truth.spec {
        return Err(Error::InvalidInput(format!(
            "grid spec mismatch: {:?} vs {:?}",
            pred.spec, truth.spec
        )));
    }
    let wanted = |c: u16| classes.is_empty() || classes.contains(&c);
    let mut acc: BTreeMap<u16, (u64, u64)> = BTreeMap::new();
    for (idx, p) in &pred.voxels {
        let t = truth.voxels.get(idx).map(|v| v.semantic_id);
        if wanted(p.semantic_id) {
            let e = acc.entry(p.semantic_id).or_insert((0, 0));
            e.1 += 1;
            if t == Some(p.semantic_id) {
                e.0 += 1;
            }
        }
    }
    for (idx, t) in &truth.voxels {
        let p = pred.voxels.get(idx).map(|v| v.semantic_id);
        if wanted(t.semantic_id) && p != Some(t.semantic_id) {
            acc.entry(t.semantic_id).or_insert((0, 0)).1 += 1;
        }
    }
    Ok(from_counts(acc))
}

const MAGIC: &[u8; 4] = b"OCG1";
const HEADER_BYTES: usize = 4 + 3 * 8 + 8 + 3 * 4 + 4 + 4;
const RECORD_BYTES: usize = 4 + 2 + 4 + 12;

/// Little-endian: magic, origin (3×f64), voxel_size (f64), dims (3×u32),
/// frame_index (u32), record count (u32), then records of linear index
/// (u32), semantic_id (u16), instance_id (u32), flow (3×f32), ascending.
pub fn encode_grid(grid: &OccupancyGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + grid.voxels.len() * RECORD_BYTES);
    out.extend_from_slice(MAGIC);
    for o in grid.spec.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&grid.spec.voxel_size.to_le_bytes());
    for d in grid.spec.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&grid.frame_index.to_le_bytes());
    out.extend_from_slice(&(grid.voxels.len() as u32).to_le_bytes());
    for (idx, v) in &grid.voxels {
        out.extend_from_slice(&idx.to_le_bytes());
        out.extend_from_slice(&v.semantic_id.to_le_bytes());
        out.extend_from_slice(&v.instance_id.to_le_bytes());
        for f in v.flow {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out
}

pub fn decode_grid(path: &Path, bytes: &[u8]) -> Result<OccupancyGrid> {
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(Error::malformed(path, "header", "not an occupancy grid file"));
    }
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let spec = GridSpec {
        origin: [f64_at(4), f64_at(12), f64_at(20)],
        voxel_size: f64_at(28),
        dims: [u32_at(36), u32_at(40), u32_at(44)],
    };
    spec.validate()
        .map_err(|e| Error::malformed(path, "header", e.to_string()))?;
    let frame_index = u32_at(48);
    let count = u32_at(52) as usize;
    if bytes.len() != HEADER_BYTES + count * RECORD_BYTES {
        return Err(Error::malformed(
            path,
            "header",
            format!(
                "{count} records declared, {} bytes of records",
                bytes.len() - HEADER_BYTES
            ),
        ));
    }
    let total = spec.dims.iter().map(|&d| d as u64).product::<u64>();
    let mut voxels = BTreeMap::new();
    for (i, r) in bytes[HEADER_BYTES..].chunks_exact(RECORD_BYTES).enumerate() {
        let idx = u32::from_le_bytes(r[0..4].try_into().unwrap());
        if idx as u64 >= total {
            return Err(Error::malformed(path, i, format!("voxel index {idx} outside grid")));
        }
        let f = |o: usize| f32::from_le_bytes(r[o..o + 4].try_into().unwrap());
        let v = Voxel {
            semantic_id: u16::from_le_bytes(r[4..6].try_into().unwrap()),
            instance_id: u32::from_le_bytes(r[6..10].try_into().unwrap()),
            flow: [f(10), f(14), f(18)],
        };
        if voxels.insert(idx, v).is_some() {
            return Err(Error::malformed(path, i, format!("duplicate voxel index {idx}")));
        }
    }
    Ok(OccupancyGrid {
        spec,
        frame_index,
        voxels,
    })
}

/// Labeled evidence for the whole sequence: background aggregated in the
/// global frame, dynamic objects in their own box coordinates so each frame
/// can place them at that frame's box.
#[derive(Debug, Clone, Default)]
pub struct SceneAggregate {
    pub static_points: Vec<LabeledPoint>,
    /// Per dynamic instance: semantic id and points in box coordinates.
    pub dynamic: BTreeMap<u32, (u16, Vec<Vector3<f64>>)>,
}

/// Dynamic-object points farther than this outside their box are dropped.
const CARVE_MARGIN: f64 = 0.2;

pub fn aggregate_scene(
    frames: &[(u32, &[Point])],
    labels: &[LabeledPointSet],
    tracks: &[ObjectTrack],
    timeline: &Timeline,
) -> Result<SceneAggregate> {
    let dynamic_boxes: BTreeMap<u32, BTreeMap<u32, Box3D>> = tracks
        .iter()
        .filter(|t| t.motion == MotionState::Dynamic)
        .map(|t| (t.instance_id, t.boxes.iter().map(|b| (b.frame_index, b.bbox)).collect()))
        .collect();
    let mut agg = SceneAggregate::default();
    for ((frame, points), set) in frames.iter().zip(labels) {
        let pose = timeline.pose(*frame)?;
        for (p, l) in points.iter().zip(&set.labels) {
            let Some(sem) = l.semantic_id else { continue };
            let inst = l.instance_id.unwrap_or(0);
            match dynamic_boxes.get(&inst) {
                Some(boxes) => {
                    if let Some(b) = boxes.get(frame) {
                        if near_box(b, p, CARVE_MARGIN) {
                            agg.dynamic
                                .entry(inst)
                                .or_insert((sem, Vec::new()))
                                .1
                                .push(b.to_local(p));
                        }
                    }
                }
                None => agg.static_points.push(LabeledPoint {
                    point: transform_point(pose, p),
                    semantic_id: sem,
                    instance_id: inst,
                }),
            }
        }
    }
    Ok(agg)
}

impl SceneAggregate {
    /// Evidence for one frame in its LiDAR coordinates.
    pub fn frame_points(&self, frame: u32, tracks: &[ObjectTrack], timeline: &Timeline) -> Result<Vec<LabeledPoint>> {
        let inv = rigid_inverse(timeline.pose(frame)?);
        let mut out: Vec<LabeledPoint> = self
            .static_points
            .iter()
            .map(|p| LabeledPoint {
                point: transform_point(&inv, &p.point),
                ..*p
            })
            .collect();
        for t in tracks {
            let Some((sem, local)) = self.dynamic.get(&t.instance_id) else {
                continue;
            };
            let Some(b) = t.boxes.iter().find(|b| b.frame_index == frame) else {
                continue;
            };
            let r = rotation_z(b.bbox.heading);
            out.extend(local.iter().map(|l| LabeledPoint {
                point: b.bbox.center + r * l,
                semantic_id: *sem,
                instance_id: t.instance_id,
            }));
        }
        Ok(out)
    }
}
