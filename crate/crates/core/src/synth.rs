//! Synthetic scenes with exact ground truth.
//!
//! The world is a ground plane (z = 0), vertical walls and oriented boxes
//! moving at constant velocity and yaw rate. LiDAR returns are analytic ray
//! casts from the sensor; masks are rendered by casting one ray per pixel
//! from each camera, so a mask holds exactly the pixels whose first hit is
//! that object.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{Box3D, MotionState};
use crate::bundle_io::{frame_file_name, save_bundle};
use crate::error::{Error, Result};
use crate::eval::{bev_intersection, clip_convex};
use crate::formats::{read_boxes, write_boxes, BoxRecord};
use crate::geometry::{rigid_inverse, transform_point, yaw_transform, Point};
use crate::occupancy::{decode_grid, encode_grid, near_box, GridSpec, LabeledPoint, OccupancyGrid, Voxel};
use crate::projection::pixel_ray;
use crate::scene::{CameraCalibration, EgoPose, MaskTrack2D, PointCloudFrame, SceneBundle};
use crate::segmentation::{decode_labels, encode_labels, LabelRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoSpec {
    pub start: [f64; 2],
    /// Radians.
    pub yaw: f64,
    /// m/s along the heading.
    pub speed: f64,
    /// rad/s.
    pub yaw_rate: f64,
}

impl Default for EgoSpec {
    fn default() -> Self {
        Self {
            start: [0.0, 0.0],
            yaw: 0.0,
            speed: 0.0,
            yaw_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSpec {
    /// Sensor height above ground, m.
    pub height: f64,
    pub beams: u32,
    /// Lowest and highest beam elevation, degrees.
    pub elevation_deg: [f64; 2],
    pub azimuth_steps: u32,
    pub max_range: f64,
    /// Gaussian range noise, m.
    pub range_noise: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            height: 1.9,
            beams: 32,
            elevation_deg: [-25.0, 2.0],
            azimuth_steps: 1024,
            max_range: 80.0,
            range_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRigSpec {
    /// One camera per entry, yaw left of the LiDAR x axis, degrees.
    pub yaws_deg: Vec<f64>,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    /// How far the cameras sit below the LiDAR, m.
    pub drop: f64,
}

impl Default for CameraRigSpec {
    fn default() -> Self {
        Self {
            yaws_deg: vec![60.0, 0.0, -60.0],
            width: 640,
            height: 400,
            fx: 400.0,
            fy: 400.0,
            drop: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSpec {
    #[serde(default = "default_wall_category")]
    pub category: String,
    pub start: [f64; 2],
    pub end: [f64; 2],
    #[serde(default = "default_wall_height")]
    pub height: f64,
}

fn default_wall_category() -> String {
    "building".into()
}

fn default_wall_height() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    #[serde(default = "default_object_category")]
    pub category: String,
    /// length, width, height.
    #[serde(default = "default_object_dims")]
    pub dims: [f64; 3],
    /// Center at t = 0, world frame.
    pub position: [f64; 2],
    #[serde(default)]
    pub heading: f64,
    /// m/s, world frame.
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub yaw_rate: f64,
}

fn default_object_category() -> String {
    "car".into()
}

fn default_object_dims() -> [f64; 3] {
    [4.5, 1.9, 1.6]
}

impl ObjectSpec {
    pub fn is_dynamic(&self) -> bool {
        self.velocity != [0.0, 0.0] || self.yaw_rate != 0.0
    }

    /// World box at time `t`.
    pub fn box_at(&self, t: f64) -> Box3D {
        Box3D::new(
            Point::new(
                self.position[0] + self.velocity[0] * t,
                self.position[1] + self.velocity[1] * t,
                0.5 * self.dims[2],
            ),
            self.dims,
            self.heading + self.yaw_rate * t,
        )
    }

    /// World velocity of a point rigidly attached to the object.
    pub fn point_velocity(&self, t: f64, p: &Point) -> Vector3<f64> {
        let c = self.box_at(t).center;
        let r = p - c;
        Vector3::new(
            self.velocity[0] - self.yaw_rate * r.y,
            self.velocity[1] + self.yaw_rate * r.x,
            0.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub frames: u32,
    /// Seconds between frames.
    pub frame_interval: f64,
    pub ego: EgoSpec,
    pub lidar: LidarSpec,
    pub cameras: CameraRigSpec,
    /// Ground category; `None` for no ground plane.
    pub ground: Option<String>,
    pub walls: Vec<WallSpec>,
    pub objects: Vec<ObjectSpec>,
    pub appearance_dim: usize,
    /// Per-mask appearance perturbation: cosine distance to the object's
    /// feature drawn uniformly from [0, appearance_noise].
    pub appearance_noise: f64,
    /// Stuff masks also cover pixels where the stuff is hidden by objects.
    pub amodal_stuff: bool,
    /// Grid of the true occupancy; `None` skips it.
    pub occupancy: Option<GridSpec>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 10,
            frame_interval: 0.1,
            ego: EgoSpec::default(),
            lidar: LidarSpec::default(),
            cameras: CameraRigSpec::default(),
            ground: Some("road".into()),
            walls: Vec::new(),
            objects: Vec::new(),
            appearance_dim: 32,
            appearance_noise: 0.05,
            amodal_stuff: false,
            occupancy: Some(GridSpec::default()),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("scenario: {m}")));
        if self.objects.is_empty() && self.walls.is_empty() && self.ground.is_none() {
            return Err(Error::Degenerate("scenario has no objects and no surfaces".into()));
        }
        if self.frames == 0 || !(self.frame_interval > 0.0) {
            return bad("frames must be ≥ 1 and frame_interval positive");
        }
        if !(self.cameras.drop > 0.0) {
            return bad("cameras must sit strictly below the LiDAR (drop > 0)");
        }
        if !(self.lidar.height > self.cameras.drop) {
            return bad("cameras must be above the ground");
        }
        if self.lidar.beams == 0 || self.lidar.azimuth_steps == 0 || !(self.lidar.max_range > 0.0) {
            return bad("LiDAR needs beams, azimuth steps and a positive range");
        }
        if self.cameras.width == 0 || self.cameras.height == 0 || !(self.cameras.fx > 0.0 && self.cameras.fy > 0.0) {
            return bad("camera intrinsics must be positive");
        }
        if self.appearance_dim < 2 || !(0.0..=1.0).contains(&self.appearance_noise) {
            return bad("appearance_dim ≥ 2 and appearance_noise in [0, 1]");
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.dims.iter().any(|d| !(*d > 0.0)) {
                return bad(&format!("object {i} has non-positive dims"));
            }
        }
        for (i, w) in self.walls.iter().enumerate() {
            if w.start == w.end || !(w.height > 0.0) {
                return bad(&format!("wall {i} is degenerate"));
            }
        }
        if let Some(g) = &self.occupancy {
            g.validate()?;
        }
        Ok(())
    }

    /// Ground, wall and object categories in first-seen order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        let all = self
            .ground
            .iter()
            .chain(self.walls.iter().map(|w| &w.category))
            .chain(self.objects.iter().map(|o| &o.category));
        for c in all {
            if !v.contains(c) {
                v.push(c.clone());
            }
        }
        v
    }

    pub fn timestamp(&self, frame: u32) -> f64 {
        frame as f64 * self.frame_interval
    }

    /// LiDAR → world at `frame`; constant speed and yaw rate.
    pub fn ego_pose(&self, frame: u32) -> Matrix4<f64> {
        let t = self.timestamp(frame);
        let e = &self.ego;
        let yaw = e.yaw + e.yaw_rate * t;
        let (dx, dy) = if e.yaw_rate.abs() < 1e-12 {
            (e.speed * t * e.yaw.cos(), e.speed * t * e.yaw.sin())
        } else {
            let r = e.speed / e.yaw_rate;
            (r * (yaw.sin() - e.yaw.sin()), -r * (yaw.cos() - e.yaw.cos()))
        };
        yaw_transform(yaw, Vector3::new(e.start[0] + dx, e.start[1] + dy, self.lidar.height))
    }

    pub fn calibrations(&self) -> Vec<CameraCalibration> {
        let rig = &self.cameras;
        let mut order: Vec<usize> = (0..rig.yaws_deg.len()).collect();
        // panorama runs left to right: largest yaw first
        order.sort_by(|&a, &b| rig.yaws_deg[b].total_cmp(&rig.yaws_deg[a]).then(a.cmp(&b)));
        rig.yaws_deg
            .iter()
            .enumerate()
            .map(|(i, &yaw_deg)| {
                let (s, c) = yaw_deg.to_radians().sin_cos();
                // rows: camera x (right), y (down), z (forward) in LiDAR axes
                let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
                let center = Vector3::new(0.0, 0.0, -rig.drop);
                CameraCalibration {
                    view_id: format!("cam{i}"),
                    rotation,
                    translation: -(rotation * center),
                    fx: rig.fx,
                    fy: rig.fy,
                    cx: rig.width as f64 / 2.0,
                    cy: rig.height as f64 / 2.0,
                    width: rig.width,
                    height: rig.height,
                    panoramic_index: order.iter().position(|&k| k == i).unwrap(),
                }
            })
            .collect()
    }
}

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Surface {
    Ground,
    Wall(usize),
    Object(usize),
}

/// World geometry at one instant.
pub struct WorldState<'a> {
    spec: &'a ScenarioSpec,
    boxes: Vec<Box3D>,
    trig: Vec<(f64, f64)>,
}

const RAY_EPS: f64 = 1e-9;

impl<'a> WorldState<'a> {
    pub fn at(spec: &'a ScenarioSpec, t: f64) -> Self {
        let boxes: Vec<Box3D> = spec.objects.iter().map(|o| o.box_at(t)).collect();
        let trig = boxes.iter().map(|b| b.heading.sin_cos()).collect();
        Self { spec, boxes, trig }
    }

    pub fn boxes(&self) -> &[Box3D] {
        &self.boxes
    }

    fn hit_box(&self, k: usize, o: &Point, d: &Vector3<f64>) -> Option<f64> {
        let b = &self.boxes[k];
        let (s, c) = self.trig[k];
        let r = o - b.center;
        let ol = [c * r.x + s * r.y, -s * r.x + c * r.y, r.z];
        let dl = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let h = 0.5 * b.dims[a];
            if dl[a].abs() < 1e-15 {
                if ol[a].abs() > h {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((-h - ol[a]) / dl[a], (h - ol[a]) / dl[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t0 > RAY_EPS).then_some(t0)
    }

    fn hit_wall(&self, k: usize, o: &Point, d: &Vector3<f64>) -> Option<f64> {
        let w = &self.spec.walls[k];
        let e = [w.end[0] - w.start[0], w.end[1] - w.start[1]];
        // o + t d = start + s e  (BEV)
        let det = d.x * (-e[1]) - d.y * (-e[0]);
        if det.abs() < 1e-15 {
            return None;
        }
        let rx = w.start[0] - o.x;
        let ry = w.start[1] - o.y;
        let t = (rx * (-e[1]) - ry * (-e[0])) / det;
        let s = (d.x * ry - d.y * rx) / det;
        let z = o.z + t * d.z;
        (t > RAY_EPS && (0.0..=1.0).contains(&s) && (0.0..=w.height).contains(&z)).then_some(t)
    }

    fn hit_ground(&self, o: &Point, d: &Vector3<f64>) -> Option<f64> {
        self.spec.ground.as_ref()?;
        let t = -o.z / d.z;
        (d.z < 0.0 && t > RAY_EPS).then_some(t)
    }

    /// Every surface the ray crosses, nearest first.
    pub fn cast_all(&self, o: &Point, d: &Vector3<f64>) -> Vec<(f64, Surface)> {
        let mut hits = Vec::new();
        if let Some(t) = self.hit_ground(o, d) {
            hits.push((t, Surface::Ground));
        }
        for k in 0..self.spec.walls.len() {
            if let Some(t) = self.hit_wall(k, o, d) {
                hits.push((t, Surface::Wall(k)));
            }
        }
        for k in 0..self.boxes.len() {
            if let Some(t) = self.hit_box(k, o, d) {
                hits.push((t, Surface::Object(k)));
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hits
    }

    /// Nearest hit; `d` need not be normalized (t is in units of `d`).
    pub fn cast(&self, o: &Point, d: &Vector3<f64>) -> Option<(f64, Surface)> {
        let mut best: Option<(f64, Surface)> = self.hit_ground(o, d).map(|t| (t, Surface::Ground));
        let mut take = |t: f64, s: Surface| {
            if best.is_none_or(|b| t < b.0) {
                best = Some((t, s));
            }
        };
        for k in 0..self.spec.walls.len() {
            if let Some(t) = self.hit_wall(k, o, d) {
                take(t, Surface::Wall(k));
            }
        }
        for k in 0..self.boxes.len() {
            if let Some(t) = self.hit_box(k, o, d) {
                take(t, Surface::Object(k));
            }
        }
        best
    }
}

/// Exact labels, boxes and occupancy of a generated scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Objects with at least one LiDAR return, per frame, LiDAR frame.
    /// Instance ids are object index + 1.
    pub boxes: Vec<BoxRecord>,
    /// Per frame, one record per point hit.
    pub labels: Vec<Vec<LabelRecord>>,
    pub occupancy: Vec<OccupancyGrid>,
    /// view id → local mask track id → true instance id.
    pub mask_ids: BTreeMap<String, BTreeMap<u32, u32>>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            return unit(v);
        }
    }
}

/// Unit vector at cosine `cos` from unit `base`, in a random direction.
fn perturb(rng: &mut ChaCha8Rng, base: &[f64], cos: f64) -> Vec<f64> {
    let mut u = random_unit(rng, base.len());
    let dot: f64 = u.iter().zip(base).map(|(a, b)| a * b).sum();
    for (x, b) in u.iter_mut().zip(base) {
        *x -= dot * b;
    }
    let u = if u.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
        unit(u)
    } else {
        let mut e = vec![0.0; base.len()];
        e[if base[0].abs() < 0.9 { 0 } else { 1 }] = 1.0;
        e
    };
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    unit(base.iter().zip(&u).map(|(b, x)| cos * b + sin * x).collect())
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_APPEARANCE: u64 = 1;
const STREAM_IDS: u64 = 2;
const STREAM_FRAME: u64 = 1 << 32;

struct FrameOutput {
    frame: PointCloudFrame,
    labels: Vec<LabelRecord>,
    masks: Vec<MaskTrack2D>,
    boxes: Vec<BoxRecord>,
    occupancy: Option<OccupancyGrid>,
}

/// Generates the bundle and its ground truth. Deterministic in the spec;
/// frames are rendered in parallel.
pub fn generate(spec: &ScenarioSpec) -> Result<(SceneBundle, GroundTruth)> {
    spec.validate()?;
    let vocab = spec.vocabulary();
    let sem = |c: &str| vocab.iter().position(|v| v == c).expect("category in vocabulary") as u16;
    let calibs = spec.calibrations();

    let mut rng = stream_rng(spec.seed, STREAM_APPEARANCE);
    let features: Vec<Vec<f64>> = spec
        .objects
        .iter()
        .map(|_| random_unit(&mut rng, spec.appearance_dim))
        .collect();
    let mut rng = stream_rng(spec.seed, STREAM_IDS);
    let n = spec.objects.len() as u32;
    let local_ids: Vec<Vec<u32>> = calibs
        .iter()
        .map(|_| {
            let mut ids: Vec<u32> = (1..=n).collect();
            ids.shuffle(&mut rng);
            ids
        })
        .collect();
    let mut mask_ids = BTreeMap::new();
    for (v, c) in calibs.iter().enumerate() {
        mask_ids.insert(
            c.view_id.clone(),
            (0..spec.objects.len())
                .map(|k| (local_ids[v][k], k as u32 + 1))
                .collect(),
        );
    }

    let outputs: Vec<FrameOutput> = (0..spec.frames)
        .into_par_iter()
        .map(|f| render_frame(spec, f, &calibs, &features, &local_ids, &sem))
        .collect();

    let mut bundle = SceneBundle {
        calibrations: calibs,
        vocabulary: vocab,
        ..SceneBundle::default()
    };
    let mut truth = GroundTruth {
        mask_ids,
        ..GroundTruth::default()
    };
    for (f, out) in outputs.into_iter().enumerate() {
        bundle.poses.push(EgoPose {
            frame_index: f as u32,
            transform: spec.ego_pose(f as u32),
        });
        bundle.frames.push(out.frame);
        bundle.mask_tracks.extend(out.masks);
        truth.labels.push(out.labels);
        truth.boxes.extend(out.boxes);
        truth.occupancy.extend(out.occupancy);
    }
    Ok((bundle, truth))
}

fn render_frame(
    spec: &ScenarioSpec,
    f: u32,
    calibs: &[CameraCalibration],
    features: &[Vec<f64>],
    local_ids: &[Vec<u32>],
    sem: &dyn Fn(&str) -> u16,
) -> FrameOutput {
    let t = spec.timestamp(f);
    let pose = spec.ego_pose(f);
    let rot = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let origin = transform_point(&pose, &Point::origin());
    let world = WorldState::at(spec, t);
    let mut rng = stream_rng(spec.seed, STREAM_FRAME + f as u64);
    let surface_labels = |s: Surface| -> (u16, u32) {
        match s {
            Surface::Ground => (sem(spec.ground.as_deref().unwrap()), 0),
            Surface::Wall(k) => (sem(&spec.walls[k].category), 0),
            Surface::Object(k) => (sem(&spec.objects[k].category), k as u32 + 1),
        }
    };

    // LiDAR
    let l = &spec.lidar;
    let noise = (l.range_noise > 0.0).then(|| Normal::new(0.0, l.range_noise).expect("valid sigma"));
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for b in 0..l.beams {
        let el = if l.beams == 1 {
            l.elevation_deg[0]
        } else {
            l.elevation_deg[0] + (l.elevation_deg[1] - l.elevation_deg[0]) * b as f64 / (l.beams - 1) as f64
        }
        .to_radians();
        for a in 0..l.azimuth_steps {
            let az = 2.0 * PI * a as f64 / l.azimuth_steps as f64;
            let dl = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let Some((range, s)) = world.cast(&origin, &(rot * dl)) else {
                continue;
            };
            if range > l.max_range {
                continue;
            }
            let r = match &noise {
                Some(n) => range + rng.sample(n),
                None => range,
            };
            let (sid, inst) = surface_labels(s);
            labels.push(LabelRecord {
                point_index: points.len() as u32,
                semantic_id: sid,
                instance_id: inst,
            });
            points.push(Point::from(dl * r));
        }
    }

    // masks
    let mut masks = Vec::new();
    let stuff_feature = {
        let mut e = vec![0.0; spec.appearance_dim];
        e[0] = 1.0;
        e
    };
    for (v, calib) in calibs.iter().enumerate() {
        let cam_center = transform_point(&pose, &crate::projection::camera_center(calib));
        let mut owners: BTreeMap<Surface, Vec<[u32; 2]>> = BTreeMap::new();
        let mut amodal: BTreeMap<Surface, Vec<[u32; 2]>> = BTreeMap::new();
        for py in 0..calib.height {
            for px in 0..calib.width {
                let d = rot * pixel_ray([px as f64 + 0.5, py as f64 + 0.5], calib);
                if spec.amodal_stuff {
                    let hits = world.cast_all(&cam_center, &d);
                    let Some(first) = hits.first() else { continue };
                    owners.entry(first.1).or_default().push([px, py]);
                    if matches!(first.1, Surface::Object(_)) {
                        if let Some(h) = hits.iter().find(|h| !matches!(h.1, Surface::Object(_))) {
                            amodal.entry(h.1).or_default().push([px, py]);
                        }
                    }
                } else if let Some((_, s)) = world.cast(&cam_center, &d) {
                    owners.entry(s).or_default().push([px, py]);
                }
            }
        }
        let mut objs: Vec<(u32, usize, Vec<[u32; 2]>)> = Vec::new();
        let mut stuff: BTreeMap<u16, Vec<[u32; 2]>> = BTreeMap::new();
        for (s, px) in owners.into_iter().chain(amodal) {
            match s {
                Surface::Object(k) => objs.push((local_ids[v][k], k, px)),
                other => stuff.entry(surface_labels(other).0).or_default().extend(px),
            }
        }
        objs.sort_by_key(|o| o.0);
        let mut k = 0u16;
        let mut push = |instance_id: Option<u32>, category: &str, mut pixels: Vec<[u32; 2]>, appearance: Vec<f64>| {
            pixels.sort_by_key(|p| (p[1], p[0]));
            pixels.dedup();
            k += 1;
            let mut m = MaskTrack2D {
                view_id: calib.view_id.clone(),
                frame_index: f,
                mask_index: k,
                instance_id,
                category: category.to_string(),
                pixels,
                box2d: [0.0; 4],
                appearance,
                confidence: 1.0,
            };
            m.box2d = m.pixel_bounds().expect("non-empty mask");
            masks.push(m);
        };
        for (local, obj, px) in objs {
            let c = 1.0 - rng.random_range(0.0..=spec.appearance_noise);
            let feat = perturb(&mut rng, &features[obj], c);
            push(Some(local), &spec.objects[obj].category, px, feat);
        }
        for (sid, px) in stuff {
            let cat = spec
                .ground
                .iter()
                .chain(spec.walls.iter().map(|w| &w.category))
                .find(|c| sem(c) == sid)
                .expect("stuff category")
                .clone();
            push(None, &cat, px, stuff_feature.clone());
        }
    }

    // boxes of objects with returns
    let inv = rigid_inverse(&pose);
    let mut hit_count = vec![0usize; spec.objects.len()];
    for r in &labels {
        if r.instance_id > 0 {
            hit_count[r.instance_id as usize - 1] += 1;
        }
    }
    let boxes = world
        .boxes()
        .iter()
        .enumerate()
        .filter(|(k, _)| hit_count[*k] > 0)
        .map(|(k, b)| BoxRecord {
            frame_index: f,
            instance_id: k as u32 + 1,
            category: spec.objects[k].category.clone(),
            bbox: b.transformed(&inv),
            motion: if spec.objects[k].is_dynamic() {
                MotionState::Dynamic
            } else {
                MotionState::Static
            },
            confidence: 1.0,
        })
        .collect();

    let occupancy = spec.occupancy.as_ref().map(|g| true_occupancy(spec, f, g, sem));
    FrameOutput {
        frame: PointCloudFrame {
            frame_index: f,
            timestamp: t,
            intensity: Some(vec![0.5; points.len()]),
            points,
        },
        labels,
        masks,
        boxes,
        occupancy,
    }
}

/// Surfaces in a frame's LiDAR coordinates.
enum Patch {
    /// Convex CCW polygon at height z.
    Horizontal {
        poly: Vec<[f64; 2]>,
        z: f64,
        sem: u16,
        inst: u32,
    },
    /// Vertical rectangle over a BEV segment.
    Vertical {
        p: [f64; 2],
        q: [f64; 2],
        z0: f64,
        z1: f64,
        sem: u16,
        inst: u32,
    },
}

fn frame_patches(spec: &ScenarioSpec, f: u32, grid: &GridSpec, sem: &dyn Fn(&str) -> u16) -> Vec<Patch> {
    let pose = spec.ego_pose(f);
    let inv = rigid_inverse(&pose);
    let to_l = |x: f64, y: f64, z: f64| transform_point(&inv, &Point::new(x, y, z));
    let ground_z = -spec.lidar.height;
    let mut out = Vec::new();
    if let Some(g) = &spec.ground {
        let (x0, y0) = (grid.origin[0], grid.origin[1]);
        let (x1, y1) = (
            x0 + grid.dims[0] as f64 * grid.voxel_size,
            y0 + grid.dims[1] as f64 * grid.voxel_size,
        );
        out.push(Patch::Horizontal {
            poly: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            z: ground_z,
            sem: sem(g),
            inst: 0,
        });
    }
    for w in &spec.walls {
        let p = to_l(w.start[0], w.start[1], 0.0);
        let q = to_l(w.end[0], w.end[1], 0.0);
        out.push(Patch::Vertical {
            p: [p.x, p.y],
            q: [q.x, q.y],
            z0: ground_z,
            z1: ground_z + w.height,
            sem: sem(&w.category),
            inst: 0,
        });
    }
    let t = spec.timestamp(f);
    for (k, o) in spec.objects.iter().enumerate() {
        let b = o.box_at(t).transformed(&inv);
        let c = b.bev_corners();
        let (s, inst) = (sem(&o.category), k as u32 + 1);
        let (z0, z1) = (b.center.z - 0.5 * b.dims[2], b.center.z + 0.5 * b.dims[2]);
        for i in 0..4 {
            out.push(Patch::Vertical {
                p: c[i],
                q: c[(i + 1) % 4],
                z0,
                z1,
                sem: s,
                inst,
            });
        }
        out.push(Patch::Horizontal {
            poly: c.to_vec(),
            z: z1,
            sem: s,
            inst,
        });
    }
    out
}

/// Length of segment `p→q` inside the axis-aligned square.
fn clip_segment(p: [f64; 2], q: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let d = [q[0] - p[0], q[1] - p[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for a in 0..2 {
        if d[a].abs() < 1e-15 {
            if p[a] < lo[a] || p[a] > hi[a] {
                return 0.0;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - p[a]) / d[a], (hi[a] - p[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    ((t1 - t0).max(0.0)) * (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn cell_range(lo: f64, hi: f64, origin: f64, size: f64, n: u32) -> std::ops::Range<u32> {
    let a = ((lo - origin) / size).floor().max(0.0);
    let b = ((hi - origin) / size).floor() + 1.0;
    let b = b.min(n as f64);
    if b <= a {
        0..0
    } else {
        a as u32..b as u32
    }
}

/// Surface area below this fraction of a voxel face is a grazing contact
/// and does not occupy the voxel.
pub const MIN_AREA_FRACTION: f64 = 0.01;

/// Analytic occupancy: a voxel is occupied when surfaces cross it with at
/// least `MIN_AREA_FRACTION` of a face's area; semantics and instance by
/// largest area (ties to the smaller id). Dynamic-object voxels carry the object's rigid velocity in
/// LiDAR axes, ego motion removed.
pub fn true_occupancy(spec: &ScenarioSpec, f: u32, grid: &GridSpec, sem: &dyn Fn(&str) -> u16) -> OccupancyGrid {
    let s = grid.voxel_size;
    let mut area: HashMap<u32, Vec<(u16, u32, f64)>> = HashMap::new();
    let mut add = |idx: u32, sem: u16, inst: u32, a: f64| {
        if a > 1e-12 {
            let e = area.entry(idx).or_default();
            match e.iter_mut().find(|x| x.0 == sem && x.1 == inst) {
                Some(x) => x.2 += a,
                None => e.push((sem, inst, a)),
            }
        }
    };
    for patch in frame_patches(spec, f, grid, sem) {
        match patch {
            Patch::Horizontal { poly, z, sem, inst } => {
                let kz = ((z - grid.origin[2]) / s).floor();
                if kz < 0.0 || kz >= grid.dims[2] as f64 {
                    continue;
                }
                let (xmin, xmax) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
                    (a.0.min(p[0]), a.1.max(p[0]))
                });
                let (ymin, ymax) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
                    (a.0.min(p[1]), a.1.max(p[1]))
                });
                for iy in cell_range(ymin, ymax, grid.origin[1], s, grid.dims[1]) {
                    for ix in cell_range(xmin, xmax, grid.origin[0], s, grid.dims[0]) {
                        let x0 = grid.origin[0] + ix as f64 * s;
                        let y0 = grid.origin[1] + iy as f64 * s;
                        let sq = [[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]];
                        let clipped = clip_convex(&sq, &poly);
                        let a = polygon_area(&clipped);
                        add(grid.linear([ix, iy, kz as u32]), sem, inst, a);
                    }
                }
            }
            Patch::Vertical {
                p,
                q,
                z0,
                z1,
                sem,
                inst,
            } => {
                for iy in cell_range(p[1].min(q[1]), p[1].max(q[1]), grid.origin[1], s, grid.dims[1]) {
                    for ix in cell_range(p[0].min(q[0]), p[0].max(q[0]), grid.origin[0], s, grid.dims[0]) {
                        let lo = [grid.origin[0] + ix as f64 * s, grid.origin[1] + iy as f64 * s];
                        let len = clip_segment(p, q, lo, [lo[0] + s, lo[1] + s]);
                        if len <= 0.0 {
                            continue;
                        }
                        for iz in cell_range(z0, z1, grid.origin[2], s, grid.dims[2]) {
                            let zl = grid.origin[2] + iz as f64 * s;
                            let h = (z1.min(zl + s) - z0.max(zl)).max(0.0);
                            add(grid.linear([ix, iy, iz]), sem, inst, len * h);
                        }
                    }
                }
            }
        }
    }
    let pose = spec.ego_pose(f);
    let inv = rigid_inverse(&pose);
    let rot_t = pose.fixed_view::<3, 3>(0, 0).transpose();
    let t = spec.timestamp(f);
    let margin = 0.5 * 3f64.sqrt() * s;
    let min_area = MIN_AREA_FRACTION * s * s;
    let voxels = area
        .into_iter()
        .filter(|(_, parts)| parts.iter().map(|p| p.2).sum::<f64>() >= min_area)
        .map(|(idx, parts)| {
            let mut by_sem: BTreeMap<u16, f64> = BTreeMap::new();
            let mut by_inst: BTreeMap<u32, f64> = BTreeMap::new();
            for (sm, inst, a) in &parts {
                *by_sem.entry(*sm).or_insert(0.0) += a;
                if *inst != 0 {
                    *by_inst.entry(*inst).or_insert(0.0) += a;
                }
            }
            let semantic_id = argmax(&by_sem).expect("non-empty").0;
            let instance_id = argmax(&by_inst).map_or(0, |x| x.0);
            let mut flow = [0.0f32; 3];
            if instance_id > 0 {
                let o = &spec.objects[instance_id as usize - 1];
                let center = grid.center(idx);
                let b_local = o.box_at(t).transformed(&inv);
                if o.is_dynamic() && near_box(&b_local, &center, margin) {
                    let v = rot_t * o.point_velocity(t, &transform_point(&pose, &center));
                    flow = [v.x as f32, v.y as f32, v.z as f32];
                }
            }
            (
                idx,
                Voxel {
                    semantic_id,
                    instance_id,
                    flow,
                },
            )
        })
        .collect();
    OccupancyGrid {
        spec: *grid,
        frame_index: f,
        voxels,
    }
}

/// Key with the largest value; ties to the smaller key.
fn argmax<K: Copy + Ord>(m: &BTreeMap<K, f64>) -> Option<(K, f64)> {
    m.iter().fold(None, |b, (k, a)| match b {
        Some((_, ba)) if ba >= *a => b,
        _ => Some((*k, *a)),
    })
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let n = poly.len();
    ((0..n)
        .map(|i| poly[i][0] * poly[(i + 1) % n][1] - poly[(i + 1) % n][0] * poly[i][1])
        .sum::<f64>()
        * 0.5)
        .max(0.0)
}

/// Lattice samples, `spacing` apart, on every surface of frame `f` (ground
/// limited to the grid), LiDAR coordinates, with true labels.
pub fn surface_samples(spec: &ScenarioSpec, f: u32, grid: &GridSpec, spacing: f64) -> Vec<LabeledPoint> {
    let vocab = spec.vocabulary();
    let sem = |c: &str| vocab.iter().position(|v| v == c).expect("category") as u16;
    let mut out = Vec::new();
    let steps = |len: f64| ((len / spacing).ceil() as usize).max(1);
    for patch in frame_patches(spec, f, grid, &sem) {
        match patch {
            Patch::Horizontal { poly, z, sem, inst } => {
                // parallelogram spanned by the first three corners (all our
                // horizontal patches are rectangles)
                let o = poly[0];
                let e1 = [poly[1][0] - o[0], poly[1][1] - o[1]];
                let e2 = [poly[3][0] - o[0], poly[3][1] - o[1]];
                let (n1, n2) = (steps(e1[0].hypot(e1[1])), steps(e2[0].hypot(e2[1])));
                for i in 0..n1 {
                    for j in 0..n2 {
                        let (a, b) = ((i as f64 + 0.5) / n1 as f64, (j as f64 + 0.5) / n2 as f64);
                        out.push(LabeledPoint {
                            point: Point::new(o[0] + a * e1[0] + b * e2[0], o[1] + a * e1[1] + b * e2[1], z),
                            semantic_id: sem,
                            instance_id: inst,
                        });
                    }
                }
            }
            Patch::Vertical {
                p,
                q,
                z0,
                z1,
                sem,
                inst,
            } => {
                let (n1, n2) = (steps((q[0] - p[0]).hypot(q[1] - p[1])), steps(z1 - z0));
                for i in 0..n1 {
                    for j in 0..n2 {
                        let (a, b) = ((i as f64 + 0.5) / n1 as f64, (j as f64 + 0.5) / n2 as f64);
                        out.push(LabeledPoint {
                            point: Point::new(p[0] + a * (q[0] - p[0]), p[1] + a * (q[1] - p[1]), z0 + b * (z1 - z0)),
                            semantic_id: sem,
                            instance_id: inst,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Randomly placed objects in front of a stationary-start ego, clear of each
/// other (1 m margin) over `frames` frames. A `moving_fraction` of them drive
/// along their heading at 2–8 m/s.
pub fn random_objects(
    seed: u64,
    count: usize,
    frames: u32,
    frame_interval: f64,
    moving_fraction: f64,
) -> Vec<ObjectSpec> {
    let mut rng = stream_rng(seed, 3);
    let mut out: Vec<ObjectSpec> = Vec::new();
    let mut attempts = 0;
    while out.len() < count && attempts < 10_000 {
        attempts += 1;
        let range = rng.random_range(7.0..30.0);
        let az = rng.random_range(-85f64..85.0).to_radians();
        let heading = rng.random_range(-PI..PI);
        let moving = rng.random_range(0.0..1.0) < moving_fraction;
        let speed = if moving { rng.random_range(2.0..8.0) } else { 0.0 };
        let cand = ObjectSpec {
            category: "car".into(),
            dims: [
                rng.random_range(3.9..4.9),
                rng.random_range(1.7..2.0),
                rng.random_range(1.4..1.8),
            ],
            position: [range * az.cos(), range * az.sin()],
            heading,
            velocity: [speed * heading.cos(), speed * heading.sin()],
            yaw_rate: 0.0,
        };
        let clear = (0..frames).all(|f| {
            let t = f as f64 * frame_interval;
            let mut b = cand.box_at(t);
            b.dims[0] += 2.0;
            b.dims[1] += 2.0;
            let ego_zone = Box3D::new(Point::new(0.0, 0.0, 0.8), [6.0, 4.0, 2.0], 0.0);
            bev_intersection(&b, &ego_zone) == 0.0
                && out.iter().all(|o| {
                    let mut ob = o.box_at(t);
                    ob.dims[0] += 2.0;
                    ob.dims[1] += 2.0;
                    bev_intersection(&b, &ob) == 0.0
                })
        });
        if clear {
            out.push(cand);
        }
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the bundle plus `truth/`: `boxes.tsv`, `labels/NNNNNN.lbl`,
/// `occupancy/NNNNNN.occ`, `mask_ids.json` and `scenario.json`.
pub fn write_scenario(spec: &ScenarioSpec, bundle: &SceneBundle, truth: &GroundTruth, dir: &Path) -> Result<()> {
    save_bundle(bundle, dir)?;
    let t = dir.join("truth");
    write(&t.join("boxes.tsv"), write_boxes(&truth.boxes).as_bytes())?;
    for (f, recs) in truth.labels.iter().enumerate() {
        write(
            &t.join("labels").join(frame_file_name(f as u32, "lbl")),
            &encode_labels(recs),
        )?;
    }
    for g in &truth.occupancy {
        write(
            &t.join("occupancy").join(frame_file_name(g.frame_index, "occ")),
            &encode_grid(g),
        )?;
    }
    let ids = serde_json::to_string_pretty(&truth.mask_ids).expect("ids serialize");
    write(&t.join("mask_ids.json"), ids.as_bytes())?;
    let sc = serde_json::to_string_pretty(spec).expect("spec serializes");
    write(&t.join("scenario.json"), sc.as_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a `truth/` directory. Missing label or occupancy directories give
/// empty lists.
pub fn load_truth(dir: &Path) -> Result<GroundTruth> {
    let bp = dir.join("boxes.tsv");
    let text = String::from_utf8(read(&bp)?).map_err(|_| Error::malformed(&bp, "file", "not UTF-8"))?;
    let boxes = read_boxes(&bp, &text)?;
    let listed = |sub: &str, ext: &str| -> Result<Vec<(u32, std::path::PathBuf)>> {
        let d = dir.join(sub);
        if !d.is_dir() {
            return Ok(Vec::new());
        }
        let mut v = Vec::new();
        for e in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.extension().and_then(|x| x.to_str()) == Some(ext) {
                let idx = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::malformed(&p, "name", "expected a frame number"))?;
                v.push((idx, p));
            }
        }
        v.sort();
        Ok(v)
    };
    let mut labels = Vec::new();
    for (_, p) in listed("labels", "lbl")? {
        labels.push(decode_labels(&p, &read(&p)?)?);
    }
    let mut occupancy = Vec::new();
    for (_, p) in listed("occupancy", "occ")? {
        occupancy.push(decode_grid(&p, &read(&p)?)?);
    }
    let mp = dir.join("mask_ids.json");
    let mask_ids = if mp.exists() {
        serde_json::from_slice(&read(&mp)?).map_err(|e| Error::malformed(&mp, "file", e))?
    } else {
        BTreeMap::new()
    };
    Ok(GroundTruth {
        boxes,
        labels,
        occupancy,
        mask_ids,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::projection::project_point;
    use crate::scene::validate_bundle;

    pub(crate) fn small_rig() -> CameraRigSpec {
        CameraRigSpec {
            width: 160,
            height: 100,
            fx: 100.0,
            fy: 100.0,
            ..CameraRigSpec::default()
        }
    }

    fn one_box(frames: u32, velocity: [f64; 2]) -> ScenarioSpec {
        ScenarioSpec {
            frames,
            cameras: CameraRigSpec {
                yaws_deg: vec![0.0],
                ..small_rig()
            },
            lidar: LidarSpec {
                beams: 16,
                azimuth_steps: 256,
                ..LidarSpec::default()
            },
            objects: vec![ObjectSpec {
                category: "car".into(),
                dims: [4.0, 2.0, 1.5],
                position: [10.0, 1.0],
                heading: 0.3,
                velocity,
                yaw_rate: 0.0,
            }],
            occupancy: None,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn static_box_points_lie_on_surfaces() {
        let spec = one_box(1, [0.0, 0.0]);
        let (bundle, truth) = generate(&spec).unwrap();
        assert!(validate_bundle(&bundle).is_empty(), "{:?}", validate_bundle(&bundle));
        let b = spec.objects[0]
            .box_at(0.0)
            .transformed(&rigid_inverse(&spec.ego_pose(0)));
        let mut on_box = 0;
        for (p, l) in bundle.frames[0].points.iter().zip(&truth.labels[0]) {
            if l.instance_id == 1 {
                let q = b.to_local(p);
                let gap = [
                    0.5 * b.dims[0] - q.x.abs(),
                    0.5 * b.dims[1] - q.y.abs(),
                    0.5 * b.dims[2] - q.z.abs(),
                ];
                assert!(
                    gap.iter().all(|g| *g >= -1e-6) && gap.iter().any(|g| g.abs() < 1e-6),
                    "{q:?}"
                );
                on_box += 1;
            } else {
                assert!((p.z + spec.lidar.height).abs() < 1e-6, "{p:?}");
            }
        }
        assert!(on_box > 0);
        assert_eq!(truth.boxes.len(), 1);
    }

    #[test]
    fn moving_box_trajectory_is_linear() {
        let spec = one_box(5, [10.0, 0.0]);
        let (_, truth) = generate(&spec).unwrap();
        let centers: Vec<Point> = truth
            .boxes
            .iter()
            .map(|r| transform_point(&spec.ego_pose(r.frame_index), &r.bbox.center))
            .collect();
        assert_eq!(centers.len(), 5);
        for (f, c) in centers.iter().enumerate() {
            assert!((c.x - (10.0 + f as f64)).abs() < 1e-9 && (c.y - 1.0).abs() < 1e-9);
        }
        assert!(truth.boxes.iter().all(|b| b.motion == MotionState::Dynamic));
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut spec = one_box(2, [3.0, 0.0]);
        spec.lidar.range_noise = 0.02;
        spec.appearance_noise = 0.1;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            let (bundle, truth) = generate(&spec).unwrap();
            write_scenario(&spec, &bundle, &truth, d.path()).unwrap();
        }
        let files = |d: &Path| {
            let mut v = Vec::new();
            let mut stack = vec![d.to_path_buf()];
            while let Some(p) = stack.pop() {
                for e in std::fs::read_dir(&p).unwrap() {
                    let e = e.unwrap().path();
                    if e.is_dir() {
                        stack.push(e);
                    } else {
                        v.push((e.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&e).unwrap()));
                    }
                }
            }
            v.sort();
            v
        };
        assert_eq!(files(a.path()), files(b.path()));
        let back = load_truth(&a.path().join("truth")).unwrap();
        let (_, truth) = generate(&spec).unwrap();
        assert_eq!(back.labels, truth.labels);
        assert_eq!(back.mask_ids, truth.mask_ids);
    }

    #[test]
    fn wall_behind_car_creates_parallax_band() {
        let mut spec = one_box(1, [0.0, 0.0]);
        spec.objects[0].position = [10.0, 0.0];
        spec.objects[0].heading = 0.0;
        spec.walls.push(WallSpec {
            category: "building".into(),
            start: [15.0 + 2.0, 8.0],
            end: [15.0 + 2.0, -8.0],
            height: 4.0,
        });
        spec.lidar.beams = 64;
        spec.lidar.azimuth_steps = 2048;
        let (bundle, truth) = generate(&spec).unwrap();
        let calib = &bundle.calibrations[0];
        let car = bundle.mask_tracks.iter().find(|m| m.instance_id.is_some()).unwrap();
        let wall_sem = bundle.semantic_id("building").unwrap();
        let inside = bundle.frames[0]
            .points
            .iter()
            .zip(&truth.labels[0])
            .filter(|(_, l)| l.semantic_id == wall_sem)
            .filter_map(|(p, _)| project_point(0, p, calib))
            .filter(|pp| {
                car.pixels
                    .binary_search_by_key(&(pp.cell()[1], pp.cell()[0]), |q| (q[1], q[0]))
                    .is_ok()
            })
            .count();
        assert!(inside > 0);
    }

    #[test]
    fn mask_pixels_see_their_object() {
        let spec = one_box(1, [0.0, 0.0]);
        let (bundle, _) = generate(&spec).unwrap();
        let pose = spec.ego_pose(0);
        let rot = pose.fixed_view::<3, 3>(0, 0).into_owned();
        let world = WorldState::at(&spec, 0.0);
        let calib = &bundle.calibrations[0];
        let center = transform_point(&pose, &crate::projection::camera_center(calib));
        let car = bundle.mask_tracks.iter().find(|m| m.instance_id.is_some()).unwrap();
        assert!(!car.pixels.is_empty());
        for p in &car.pixels {
            let d = rot * pixel_ray([p[0] as f64 + 0.5, p[1] as f64 + 0.5], calib);
            assert_eq!(world.cast(&center, &d).unwrap().1, Surface::Object(0));
        }
        let total: usize = bundle.mask_tracks.iter().map(|m| m.pixels.len()).sum();
        assert!(total <= (calib.width * calib.height) as usize);
    }

    #[test]
    fn appearance_noise_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_unit(&mut rng, 16);
        for _ in 0..100 {
            let c = rng.random_range(0.9..=1.0);
            let v = perturb(&mut rng, &base, c);
            let dot: f64 = v.iter().zip(&base).map(|(a, b)| a * b).sum();
            assert!((dot - c).abs() < 1e-9);
        }
    }

    #[test]
    fn true_occupancy_matches_dense_sampling() {
        let mut spec = one_box(1, [0.0, 0.0]);
        spec.walls.push(WallSpec {
            category: "building".into(),
            start: [3.0, 6.1],
            end: [14.0, 7.3],
            height: 3.0,
        });
        let grid = GridSpec {
            origin: [0.05, -4.95, -2.95],
            voxel_size: 0.4,
            dims: [50, 40, 12],
        };
        spec.occupancy = Some(grid);
        let (_, truth) = generate(&spec).unwrap();
        let samples = surface_samples(&spec, 0, &grid, 0.01);
        let dense = crate::occupancy::voxelize(&samples, &grid, 0, 1);
        let r = crate::occupancy::occupancy_miou(&dense, &truth.occupancy[0], &[]).unwrap();
        for c in &r.per_class {
            assert!(c.iou >= 0.95, "{c:?}");
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let empty = ScenarioSpec {
            ground: None,
            ..ScenarioSpec::default()
        };
        assert!(matches!(generate(&empty), Err(Error::Degenerate(_))));
        let mut above = one_box(1, [0.0, 0.0]);
        above.cameras.drop = 0.0;
        assert!(generate(&above).is_err());
        let parsed: std::result::Result<ScenarioSpec, _> = serde_json::from_str(r#"{"seed": 1, "bogus": 2}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn random_objects_keep_clear() {
        let objs = random_objects(9, 10, 20, 0.1, 0.5);
        assert_eq!(objs.len(), 10);
        assert_eq!(objs, random_objects(9, 10, 20, 0.1, 0.5));
    }
}
