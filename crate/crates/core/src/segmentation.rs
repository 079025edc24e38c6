//! 2D mask labels transferred to LiDAR points, with parallax occlusion
//! filtering and per-instance density denoising.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::association::GlobalIdMap;
use crate::dbscan::{dbscan, largest_cluster};
use crate::error::{Error, Result};
use crate::geometry::{median, Point};
use crate::projection::{project_frame, ProjectedPoint};
use crate::scene::{CameraCalibration, MaskTrack2D, PointCloudFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallaxConfig {
    pub kernel_size: u32,
    pub step_h: u32,
    pub step_v: u32,
    pub depth_ratio_threshold: f64,
    /// Right extent of the rectangle built from a single near point.
    pub pseudo_width: f64,
}

impl Default for ParallaxConfig {
    fn default() -> Self {
        Self {
            kernel_size: 15,
            step_h: 10,
            step_v: 5,
            depth_ratio_threshold: 0.25,
            pseudo_width: 15.0,
        }
    }
}

impl ParallaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.step_h == 0 || self.step_v == 0 {
            return Err(Error::Config("parallax kernel and steps must be positive".into()));
        }
        if !(self.pseudo_width > 0.0) || !(self.depth_ratio_threshold > 0.0) {
            return Err(Error::Config(
                "parallax pseudo_width and threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self { eps: 0.5, min_pts: 5 }
    }
}

/// Label-relevant facts about one mask of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskInfo {
    pub view: usize,
    pub semantic_id: u16,
    /// Global instance id; `None` for stuff.
    pub instance_id: Option<u32>,
    pub thing: bool,
}

/// The masks of one frame together with their resolved labels.
#[derive(Debug, Clone)]
pub struct FrameMasks<'a> {
    pub masks: Vec<&'a MaskTrack2D>,
    pub info: Vec<MaskInfo>,
}

impl<'a> FrameMasks<'a> {
    pub fn new(
        masks: Vec<&'a MaskTrack2D>,
        calibs: &[CameraCalibration],
        vocabulary: &[String],
        ids: &GlobalIdMap,
    ) -> Result<Self> {
        let info = masks
            .iter()
            .map(|m| {
                let view = calibs
                    .iter()
                    .position(|c| c.view_id == m.view_id)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown view `{}`", m.view_id)))?;
                let semantic_id = vocabulary
                    .iter()
                    .position(|c| *c == m.category)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown category `{}`", m.category)))?
                    as u16;
                Ok(MaskInfo {
                    view,
                    semantic_id,
                    instance_id: ids.for_mask(m),
                    thing: m.is_thing(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { masks, info })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn mask_contains(mask: &MaskTrack2D, cell: [u32; 2]) -> bool {
    let [u, v] = cell;
    let b = &mask.box2d;
    if (u as f64) < b[0] || (u as f64) >= b[2] || (v as f64) < b[1] || (v as f64) >= b[3] {
        return false;
    }
    mask.pixels.binary_search_by(|p| (p[1], p[0]).cmp(&(v, u))).is_ok()
}

/// One mask a point projects into.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Index into the frame's mask list.
    pub mask: u32,
    pub pixel: [f64; 2],
    pub depth: f64,
}

/// Every candidate mask of every point of one frame, before reconciliation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawLabels {
    pub frame_index: u32,
    pub candidates: Vec<Vec<Candidate>>,
}

impl RawLabels {
    /// Candidates restricted to the mask each point finally received; unlabeled
    /// points keep nothing.
    pub fn restricted_to(&self, labeled: &LabeledPointSet) -> RawLabels {
        let candidates = self
            .candidates
            .iter()
            .zip(&labeled.labels)
            .map(|(cs, l)| match l.source {
                Some(src) => cs.iter().copied().filter(|c| c.mask == src.mask).collect(),
                None => Vec::new(),
            })
            .collect();
        RawLabels {
            frame_index: self.frame_index,
            candidates,
        }
    }

    /// Naive labeling: first thing candidate, else first stuff candidate.
    pub fn first_claim(&self, masks: &FrameMasks) -> LabeledPointSet {
        let labels = self
            .candidates
            .iter()
            .map(|cs| {
                cs.iter()
                    .find(|c| masks.info[c.mask as usize].thing)
                    .or_else(|| cs.first())
                    .map(|c| PointLabel::from_mask(&masks.info[c.mask as usize], *c))
                    .unwrap_or_default()
            })
            .collect();
        LabeledPointSet {
            frame_index: self.frame_index,
            labels,
        }
    }
}

/// Where a point's label came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSource {
    pub mask: u32,
    pub view: usize,
    /// Depth in the source view's camera frame.
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointLabel {
    pub semantic_id: Option<u16>,
    pub instance_id: Option<u32>,
    pub source: Option<LabelSource>,
}

impl PointLabel {
    fn from_mask(info: &MaskInfo, c: Candidate) -> Self {
        Self {
            semantic_id: Some(info.semantic_id),
            instance_id: info.instance_id,
            source: Some(LabelSource {
                mask: c.mask,
                view: info.view,
                depth: c.depth,
            }),
        }
    }
}

/// Per-point labels of one frame, indexed like the frame's points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledPointSet {
    pub frame_index: u32,
    pub labels: Vec<PointLabel>,
}

impl LabeledPointSet {
    pub fn unlabeled(frame_index: u32, n: usize) -> Self {
        Self {
            frame_index,
            labels: vec![PointLabel::default(); n],
        }
    }

    /// Point indices per instance id.
    pub fn instances(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(id) = l.instance_id {
                out.entry(id).or_default().push(i);
            }
        }
        out
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.semantic_id.is_some()).count()
    }

    pub fn to_records(&self) -> Vec<LabelRecord> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                l.semantic_id.map(|s| LabelRecord {
                    point_index: i as u32,
                    semantic_id: s,
                    instance_id: l.instance_id.unwrap_or(0),
                })
            })
            .collect()
    }

    /// Rebuilds a label set from file records; sources are not stored.
    pub fn from_records(frame_index: u32, n: usize, records: &[LabelRecord]) -> Result<Self> {
        let mut out = Self::unlabeled(frame_index, n);
        for r in records {
            let l = out.labels.get_mut(r.point_index as usize).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "label for point {} but frame {frame_index} has {n} points",
                    r.point_index
                ))
            })?;
            l.semantic_id = Some(r.semantic_id);
            l.instance_id = (r.instance_id != 0).then_some(r.instance_id);
        }
        Ok(out)
    }
}

/// One row of a label file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelRecord {
    pub point_index: u32,
    pub semantic_id: u16,
    /// 0 = no instance.
    pub instance_id: u32,
}

pub const LABEL_RECORD_BYTES: usize = 10;

pub fn encode_labels(records: &[LabelRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * LABEL_RECORD_BYTES);
    for r in records {
        out.extend_from_slice(&r.point_index.to_le_bytes());
        out.extend_from_slice(&r.semantic_id.to_le_bytes());
        out.extend_from_slice(&r.instance_id.to_le_bytes());
    }
    out
}

pub fn decode_labels(path: &std::path::Path, bytes: &[u8]) -> Result<Vec<LabelRecord>> {
    if !bytes.len().is_multiple_of(LABEL_RECORD_BYTES) {
        return Err(Error::malformed(
            path,
            format!("byte {}", bytes.len() - bytes.len() % LABEL_RECORD_BYTES),
            "truncated label record",
        ));
    }
    Ok(bytes
        .chunks_exact(LABEL_RECORD_BYTES)
        .map(|c| LabelRecord {
            point_index: u32::from_le_bytes(c[0..4].try_into().unwrap()),
            semantic_id: u16::from_le_bytes(c[4..6].try_into().unwrap()),
            instance_id: u32::from_le_bytes(c[6..10].try_into().unwrap()),
        })
        .collect())
}

/// Candidate masks for every point of the frame (floor rasterization).
pub fn assign_by_projection(frame: &PointCloudFrame, calibs: &[CameraCalibration], masks: &FrameMasks) -> RawLabels {
    let mut candidates = vec![Vec::new(); frame.points.len()];
    for (view, calib) in calibs.iter().enumerate() {
        let in_view: Vec<usize> = (0..masks.len()).filter(|&m| masks.info[m].view == view).collect();
        if in_view.is_empty() {
            continue;
        }
        for pp in project_frame(frame, calib) {
            let cell = pp.cell();
            for &m in &in_view {
                if mask_contains(masks.masks[m], cell) {
                    candidates[pp.point_index].push(Candidate {
                        mask: m as u32,
                        pixel: pp.pixel,
                        depth: pp.depth,
                    });
                }
            }
        }
    }
    RawLabels {
        frame_index: frame.frame_index,
        candidates,
    }
}

/// Split of one mask's points by the parallax filter, as `point_index` values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParallaxSplit {
    pub kept: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Sliding-window parallax occlusion filter over one mask's projected points.
///
/// `region` is the mask box `(u_min, v_min, u_max, v_max)`; windows of `k×k`
/// pixels start at its top-left corner and advance by `(step_h, step_v)` until
/// they pass the far edges. Each window is judged on all of the mask's points,
/// so the result does not depend on window order.
pub fn parallax_filter(points: &[ProjectedPoint], region: [f64; 4], cfg: &ParallaxConfig) -> ParallaxSplit {
    let rejected = parallax_reject(points, region, cfg);
    let mut split = ParallaxSplit::default();
    for (p, r) in points.iter().zip(rejected) {
        if r {
            split.rejected.push(p.point_index);
        } else {
            split.kept.push(p.point_index);
        }
    }
    split
}

/// Per-input-position rejection flags.
fn parallax_reject(points: &[ProjectedPoint], region: [f64; 4], cfg: &ParallaxConfig) -> Vec<bool> {
    let mut rejected = vec![false; points.len()];
    if points.len() < 2 {
        return rejected;
    }
    let k = cfg.kernel_size as f64;
    let theta = cfg.depth_ratio_threshold;

    let mut by_v: Vec<usize> = (0..points.len()).collect();
    by_v.sort_by(|&a, &b| points[a].pixel[1].total_cmp(&points[b].pixel[1]).then(a.cmp(&b)));
    let vs: Vec<f64> = by_v.iter().map(|&i| points[i].pixel[1]).collect();

    let mut row = Vec::new();
    let mut win = Vec::new();
    let mut wy = region[1];
    while wy < region[3] {
        let lo = vs.partition_point(|&v| v < wy);
        let hi = vs.partition_point(|&v| v < wy + k);
        if hi - lo >= 2 {
            row.clear();
            row.extend_from_slice(&by_v[lo..hi]);
            row.sort_by(|&a, &b| points[a].pixel[0].total_cmp(&points[b].pixel[0]).then(a.cmp(&b)));
            let us: Vec<f64> = row.iter().map(|&i| points[i].pixel[0]).collect();
            let mut wx = region[0];
            while wx < region[2] {
                let a = us.partition_point(|&u| u < wx);
                let b = us.partition_point(|&u| u < wx + k);
                if b - a >= 2 {
                    win.clear();
                    win.extend_from_slice(&row[a..b]);
                    judge_window(points, &win, wy + k, theta, cfg.pseudo_width, &mut rejected);
                }
                wx += cfg.step_h as f64;
            }
        }
        wy += cfg.step_v as f64;
    }
    rejected
}

fn judge_window(
    points: &[ProjectedPoint],
    win: &[usize],
    bottom: f64,
    theta: f64,
    pseudo_width: f64,
    rejected: &mut [bool],
) {
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in win {
        dmin = dmin.min(points[i].depth);
        dmax = dmax.max(points[i].depth);
    }
    if !((dmax - dmin) / dmin > theta) {
        return;
    }
    let split = dmin * (1.0 + theta);
    let (mut left, mut right, mut top, mut n_near) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, 0);
    for &i in win {
        let p = &points[i];
        if p.depth <= split {
            n_near += 1;
            left = left.min(p.pixel[0]);
            right = right.max(p.pixel[0]);
            top = top.min(p.pixel[1]);
        }
    }
    if n_near == 1 {
        right = left + pseudo_width;
    }
    for &i in win {
        let p = &points[i];
        if p.depth > split && p.pixel[0] >= left && p.pixel[0] <= right && p.pixel[1] >= top && p.pixel[1] < bottom {
            rejected[i] = true;
        }
    }
}

fn candidate_points(raw: &RawLabels, mask: u32, allowed: impl Fn(usize) -> bool) -> Vec<ProjectedPoint> {
    raw.candidates
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .filter_map(|(i, cs)| {
            cs.iter().find(|c| c.mask == mask).map(|c| ProjectedPoint {
                point_index: i,
                pixel: c.pixel,
                depth: c.depth,
            })
        })
        .collect()
}

/// Median candidate depth per mask; `None` for masks without points.
fn median_depths(raw: &RawLabels, n_masks: usize) -> Vec<Option<f64>> {
    let mut depths = vec![Vec::new(); n_masks];
    for cs in &raw.candidates {
        for c in cs {
            depths[c.mask as usize].push(c.depth);
        }
    }
    depths.iter_mut().map(|d| median(d)).collect()
}

/// Thing masks in processing order: ascending median depth, then view, then
/// mask index. Masks without points are left out.
pub fn processing_order(raw: &RawLabels, masks: &FrameMasks) -> Vec<usize> {
    let med = median_depths(raw, masks.len());
    let mut order: Vec<usize> = (0..masks.len())
        .filter(|&m| masks.info[m].thing && med[m].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        med[a]
            .unwrap()
            .total_cmp(&med[b].unwrap())
            .then(masks.info[a].view.cmp(&masks.info[b].view))
            .then(masks.masks[a].mask_index.cmp(&masks.masks[b].mask_index))
    });
    order
}

/// Near-to-far reconciliation of the raw candidates.
///
/// Thing masks claim their non-occluded points in ascending median depth; a
/// point claimed by a nearer mask is invisible to farther ones. Each mask is
/// filtered until its kept set is stable. Points not claimed by any thing mask
/// take the deepest covering stuff mask, else stay unlabeled.
pub fn filter_scene(raw: &RawLabels, masks: &FrameMasks, cfg: &ParallaxConfig) -> LabeledPointSet {
    let n = raw.candidates.len();
    let mut labels = vec![PointLabel::default(); n];
    let mut claimed = vec![false; n];
    // (point, instance) pairs already judged occluded for that instance
    let mut vetoed: HashSet<(usize, Option<u32>)> = HashSet::new();

    for m in processing_order(raw, masks) {
        let info = &masks.info[m];
        let mut pts = candidate_points(raw, m as u32, |i| {
            !claimed[i] && !vetoed.contains(&(i, info.instance_id))
        });
        let region = masks.masks[m].box2d;
        loop {
            let rej = parallax_reject(&pts, region, cfg);
            if !rej.iter().any(|&r| r) {
                break;
            }
            let mut kept = Vec::with_capacity(pts.len());
            for (p, r) in pts.into_iter().zip(rej) {
                if r {
                    vetoed.insert((p.point_index, info.instance_id));
                } else {
                    kept.push(p);
                }
            }
            pts = kept;
        }
        for p in pts {
            claimed[p.point_index] = true;
            labels[p.point_index] = PointLabel::from_mask(
                info,
                Candidate {
                    mask: m as u32,
                    pixel: p.pixel,
                    depth: p.depth,
                },
            );
        }
    }

    let med = median_depths(raw, masks.len());
    for (i, cs) in raw.candidates.iter().enumerate() {
        if claimed[i] {
            continue;
        }
        let stuff = cs
            .iter()
            .filter(|c| !masks.info[c.mask as usize].thing && med[c.mask as usize].is_some())
            .max_by(|a, b| {
                med[a.mask as usize]
                    .unwrap()
                    .total_cmp(&med[b.mask as usize].unwrap())
                    .then(b.mask.cmp(&a.mask))
            });
        if let Some(c) = stuff {
            labels[i] = PointLabel::from_mask(&masks.info[c.mask as usize], *c);
        }
    }
    LabeledPointSet {
        frame_index: raw.frame_index,
        labels,
    }
}

/// Instance ids removed entirely by denoising.
pub type DroppedInstances = Vec<u32>;

/// Keeps each instance's largest density cluster; everything else of the
/// instance becomes unlabeled.
pub fn denoise_instances(
    labeled: &LabeledPointSet,
    points: &[Point],
    params: &DbscanParams,
) -> (LabeledPointSet, DroppedInstances) {
    let mut out = labeled.clone();
    let mut dropped = Vec::new();
    for (id, idx) in labeled.instances() {
        let pts: Vec<Point> = idx.iter().map(|&i| points[i]).collect();
        let cl = dbscan(&pts, params.eps, params.min_pts);
        let keep = largest_cluster(&cl);
        if keep.is_none() {
            log::info!(
                "frame {}: instance {id} dropped by denoising ({} points)",
                labeled.frame_index,
                idx.len()
            );
            dropped.push(id);
        }
        for (&i, &c) in idx.iter().zip(&cl) {
            if Some(c) != keep {
                out.labels[i] = PointLabel::default();
            }
        }
    }
    (out, dropped)
}

/// Instance ids present in a set of label files.
pub fn distinct_instances<'a>(sets: impl IntoIterator<Item = &'a LabeledPointSet>) -> BTreeSet<u32> {
    sets.into_iter()
        .flat_map(|s| s.labels.iter().filter_map(|l| l.instance_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pp(i: usize, u: f64, v: f64, d: f64) -> ProjectedPoint {
        ProjectedPoint {
            point_index: i,
            pixel: [u, v],
            depth: d,
        }
    }

    const REGION: [f64; 4] = [0.0, 0.0, 15.0, 15.0];

    #[test]
    fn equal_depths_reject_nothing() {
        let pts: Vec<_> = (0..10).map(|i| pp(i, i as f64, i as f64, 7.0)).collect();
        let s = parallax_filter(&pts, REGION, &ParallaxConfig::default());
        assert!(s.rejected.is_empty());
        assert_eq!(s.kept.len(), 10);
    }

    #[test]
    fn far_point_below_near_point_rejected() {
        // ratio (10 − 5)/5 = 1 > 0.25; single near point: rect [5, 5 + 15] × [2, 15)
        let pts = [pp(0, 5.0, 2.0, 5.0), pp(1, 5.0, 8.0, 10.0)];
        let s = parallax_filter(&pts, REGION, &ParallaxConfig::default());
        assert_eq!(s.rejected, vec![1]);
        assert_eq!(s.kept, vec![0]);
    }

    #[test]
    fn far_point_above_near_points_survives() {
        let pts = [pp(0, 3.0, 9.0, 5.0), pp(1, 9.0, 9.0, 5.1), pp(2, 6.0, 4.0, 10.0)];
        let s = parallax_filter(&pts, REGION, &ParallaxConfig::default());
        assert!(s.rejected.is_empty());
    }

    #[test]
    fn two_near_points_bound_the_rect() {
        // rect [3, 9]; far point at u = 12 lies outside it
        let pts = [
            pp(0, 3.0, 2.0, 5.0),
            pp(1, 9.0, 2.0, 5.1),
            pp(2, 6.0, 8.0, 10.0),
            pp(3, 12.0, 8.0, 10.0),
        ];
        let cfg = ParallaxConfig {
            step_h: 100,
            step_v: 100,
            ..Default::default()
        };
        let s = parallax_filter(&pts, REGION, &cfg);
        assert_eq!(s.rejected, vec![2]);
    }

    #[test]
    fn default_config_constants() {
        let c = ParallaxConfig::default();
        assert_eq!(
            (c.kernel_size, c.step_h, c.step_v, c.depth_ratio_threshold),
            (15, 10, 5, 0.25)
        );
        assert!(c.validate().is_ok());
        assert!(ParallaxConfig { step_v: 0, ..c }.validate().is_err());
    }

    fn random_window(rng: &mut ChaCha8Rng) -> Vec<ProjectedPoint> {
        let n = rng.random_range(0..40);
        (0..n)
            .map(|i| {
                pp(
                    i,
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..40.0),
                    if rng.random_bool(0.5) {
                        rng.random_range(5.0..6.0)
                    } else {
                        rng.random_range(5.0..15.0)
                    },
                )
            })
            .collect()
    }

    proptest! {
        #[test]
        fn kept_and_rejected_partition_input(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_window(&mut rng);
            let s = parallax_filter(&pts, [0.0, 0.0, 40.0, 40.0], &ParallaxConfig::default());
            let mut all: Vec<usize> = s.kept.iter().chain(&s.rejected).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..pts.len()).collect::<Vec<_>>());
        }

        #[test]
        fn single_window_near_points_never_rejected(seed in 0u64..10_000, theta in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = random_window(&mut rng).into_iter()
                .map(|p| pp(p.point_index, p.pixel[0] * 0.35, p.pixel[1] * 0.35, p.depth)).collect();
            let cfg = ParallaxConfig { depth_ratio_threshold: theta, ..Default::default() };
            let s = parallax_filter(&pts, [0.0, 0.0, 1.0, 1.0], &cfg);
            let dmin = pts.iter().map(|p| p.depth).fold(f64::INFINITY, f64::min);
            for &i in &s.rejected {
                prop_assert!(pts[i].depth > dmin * (1.0 + theta));
            }
        }

        #[test]
        fn larger_theta_rejects_no_more_when_split_is_unchanged(
            seed in 0u64..10_000, t1 in 0.05f64..0.5, dt in 0.0f64..0.5,
        ) {
            // one window; near depths in [5, 5.2], far depths ≥ 10, so any
            // θ in (0.04, 1) yields the same near/far split
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = (0..rng.random_range(2..25)).map(|i| {
                let near = i == 0 || rng.random_bool(0.5);
                pp(i, rng.random_range(0.0..14.0), rng.random_range(0.0..14.0),
                   if i == 0 { 5.0 } else if near { rng.random_range(5.0..5.2) } else { rng.random_range(10.0..20.0) })
            }).collect();
            let c1 = ParallaxConfig { depth_ratio_threshold: t1, ..Default::default() };
            let c2 = ParallaxConfig { depth_ratio_threshold: (t1 + dt).min(0.99), ..Default::default() };
            let r1: BTreeSet<_> = parallax_filter(&pts, [0.0, 0.0, 1.0, 1.0], &c1).rejected.into_iter().collect();
            let r2: BTreeSet<_> = parallax_filter(&pts, [0.0, 0.0, 1.0, 1.0], &c2).rejected.into_iter().collect();
            prop_assert!(r2.is_subset(&r1));
        }
    }

    #[test]
    fn split_change_can_grow_the_rect() {
        // the Fig. 4 rectangle is built from the near set, which grows with θ:
        // at θ = 0.1 only u = 10 is near (rect [10, 25]); at θ = 0.25 the
        // point at u = 0 joins it (rect [0, 10]) and covers the far point at u = 5
        let pts = [pp(0, 10.0, 1.0, 5.0), pp(1, 0.0, 1.0, 5.6), pp(2, 5.0, 6.0, 10.0)];
        let one = |t| {
            let cfg = ParallaxConfig {
                depth_ratio_threshold: t,
                ..Default::default()
            };
            parallax_filter(&pts, [0.0, 0.0, 1.0, 1.0], &cfg).rejected
        };
        assert_eq!(one(0.1), Vec::<usize>::new());
        assert_eq!(one(0.25), vec![2]);
    }

    // --- scene-level ---

    use crate::association::{GlobalIdMap, TrackBinding};
    use nalgebra::{Matrix3, Vector3};

    /// Camera looking along +x of the LiDAR frame: x_cam = −y, y_cam = −z, z_cam = x.
    fn forward_calib() -> CameraCalibration {
        CameraCalibration {
            view_id: "front".into(),
            rotation: Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            translation: Vector3::zeros(),
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            panoramic_index: 0,
        }
    }

    fn rect_mask(
        local: Option<u32>,
        cat: &str,
        k: u16,
        u: std::ops::Range<u32>,
        v: std::ops::Range<u32>,
    ) -> MaskTrack2D {
        let mut pixels = Vec::new();
        for vv in v.clone() {
            for uu in u.clone() {
                pixels.push([uu, vv]);
            }
        }
        MaskTrack2D {
            view_id: "front".into(),
            frame_index: 0,
            mask_index: k,
            instance_id: local,
            category: cat.into(),
            pixels,
            box2d: [u.start as f64, v.start as f64, u.end as f64, v.end as f64],
            appearance: vec![1.0],
            confidence: 1.0,
        }
    }

    fn ids() -> GlobalIdMap {
        GlobalIdMap::from_bindings(
            vec![TrackBinding {
                view_id: "front".into(),
                local_id: 1,
                global_id: 7,
            }],
            vec![],
        )
    }

    fn vocab() -> Vec<String> {
        vec!["road".into(), "wall".into(), "car".into()]
    }

    /// Points at pixel (u, v) and the given depth, for the forward camera.
    fn at(u: f64, v: f64, d: f64) -> Point {
        Point::new(d, -(u - 50.0) * d / 100.0, -(v - 50.0) * d / 100.0)
    }

    #[test]
    fn outside_every_mask_is_unlabeled() {
        let calibs = [forward_calib()];
        let car = rect_mask(Some(1), "car", 1, 40..60, 40..60);
        let fm = FrameMasks::new(vec![&car], &calibs, &vocab(), &ids()).unwrap();
        let frame = PointCloudFrame {
            frame_index: 0,
            timestamp: 0.0,
            points: vec![at(10.5, 10.5, 8.0), at(50.5, 50.5, 8.0), at(50.0, 50.0, -8.0)],
            intensity: None,
        };
        let raw = assign_by_projection(&frame, &calibs, &fm);
        assert!(raw.candidates[0].is_empty());
        assert_eq!(raw.candidates[1].len(), 1);
        assert!(raw.candidates[2].is_empty());
        let out = filter_scene(&raw, &fm, &ParallaxConfig::default());
        assert_eq!(out.labels[1].instance_id, Some(7));
        assert_eq!(out.labels[1].semantic_id, Some(2));
        assert_eq!(out.labels[0], PointLabel::default());
    }

    fn occlusion_scene() -> (PointCloudFrame, Vec<MaskTrack2D>) {
        let car = rect_mask(Some(1), "car", 1, 40..60, 40..60);
        // amodal road under everything
        let road = rect_mask(None, "road", 2, 0..100, 0..100);
        let mut points = Vec::new();
        // car surface at 6 m, dense
        for v in 40..60 {
            for u in 40..60 {
                points.push(at(u as f64 + 0.5, v as f64 + 0.5, 6.0));
            }
        }
        let n_car = points.len();
        // background at 12 m leaking into the lower part of the car mask
        for v in 45..60 {
            for u in 40..60 {
                points.push(at(u as f64 + 0.5, v as f64 + 0.5, 12.0));
            }
        }
        let frame = PointCloudFrame {
            frame_index: 0,
            timestamp: 0.0,
            intensity: None,
            points,
        };
        assert_eq!(n_car, 400);
        (frame, vec![car, road])
    }

    #[test]
    fn occluded_points_fall_back_to_road() {
        let calibs = [forward_calib()];
        let (frame, masks) = occlusion_scene();
        let fm = FrameMasks::new(masks.iter().collect(), &calibs, &vocab(), &ids()).unwrap();
        let raw = assign_by_projection(&frame, &calibs, &fm);
        let out = filter_scene(&raw, &fm, &ParallaxConfig::default());
        assert!(out.labels[..400].iter().all(|l| l.instance_id == Some(7)));
        assert!(out.labels[400..]
            .iter()
            .all(|l| l.instance_id.is_none() && l.semantic_id == Some(0)));
    }

    #[test]
    fn filter_scene_is_idempotent() {
        let calibs = [forward_calib()];
        let (frame, masks) = occlusion_scene();
        let fm = FrameMasks::new(masks.iter().collect(), &calibs, &vocab(), &ids()).unwrap();
        let raw = assign_by_projection(&frame, &calibs, &fm);
        let cfg = ParallaxConfig::default();
        let once = filter_scene(&raw, &fm, &cfg);
        let twice = filter_scene(&raw.restricted_to(&once), &fm, &cfg);
        assert_eq!(once, twice);
    }

    #[test]
    fn lone_object_is_unchanged_by_filtering() {
        let calibs = [forward_calib()];
        let car = rect_mask(Some(1), "car", 1, 40..60, 40..60);
        let fm = FrameMasks::new(vec![&car], &calibs, &vocab(), &ids()).unwrap();
        let frame = PointCloudFrame {
            frame_index: 0,
            timestamp: 0.0,
            intensity: None,
            points: (0..100)
                .map(|i| {
                    at(
                        40.5 + (i % 10) as f64 * 2.0,
                        40.5 + (i / 10) as f64 * 2.0,
                        6.0 + 0.01 * i as f64,
                    )
                })
                .collect(),
        };
        let raw = assign_by_projection(&frame, &calibs, &fm);
        assert_eq!(
            filter_scene(&raw, &fm, &ParallaxConfig::default()),
            raw.first_claim(&fm)
        );
    }

    #[test]
    fn denoise_demotes_scattered_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut points: Vec<Point> = (0..95)
            .map(|_| {
                Point::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        for k in 0..5 {
            points.push(Point::new(20.0 + 10.0 * k as f64, 0.0, 0.0));
        }
        let mut set = LabeledPointSet::unlabeled(0, 100);
        for l in &mut set.labels {
            l.semantic_id = Some(2);
            l.instance_id = Some(3);
        }
        let (out, dropped) = denoise_instances(&set, &points, &DbscanParams::default());
        assert!(dropped.is_empty());
        assert_eq!(out.labels.iter().filter(|l| l.instance_id.is_none()).count(), 5);
        assert!(out.labels[95..].iter().all(|l| l.semantic_id.is_none()));
    }

    #[test]
    fn tiny_instance_is_dropped() {
        let points = vec![Point::origin(), Point::new(0.1, 0.0, 0.0)];
        let mut set = LabeledPointSet::unlabeled(0, 2);
        for l in &mut set.labels {
            l.semantic_id = Some(2);
            l.instance_id = Some(9);
        }
        let (out, dropped) = denoise_instances(&set, &points, &DbscanParams::default());
        assert_eq!(dropped, vec![9]);
        assert!(out.instances().is_empty());
    }

    #[test]
    fn label_records_round_trip() {
        let recs = vec![
            LabelRecord {
                point_index: 0,
                semantic_id: 3,
                instance_id: 0,
            },
            LabelRecord {
                point_index: 70000,
                semantic_id: 1,
                instance_id: 123456,
            },
        ];
        let bytes = encode_labels(&recs);
        assert_eq!(bytes.len(), 20);
        let p = std::path::Path::new("x.lbl");
        assert_eq!(decode_labels(p, &bytes).unwrap(), recs);
        assert!(decode_labels(p, &bytes[..15]).is_err());
        let set = LabeledPointSet::from_records(0, 70001, &recs).unwrap();
        assert_eq!(set.to_records(), recs);
        assert!(LabeledPointSet::from_records(0, 10, &recs).is_err());
    }
}
