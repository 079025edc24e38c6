//! Detection AP/recall under IoU and BEV-distance criteria, range and FOV
//! breakdowns, segmentation mIoU.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::occupancy::MiouReport;
use crate::projection::{to_camera, to_pixel};
use crate::scene::CameraCalibration;

/// Signed area of a polygon (CCW positive).
fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        * 0.5
}

/// Sutherland–Hodgman clip of `subject` by a convex CCW `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    if poly.len() < 3 {
        0.0
    } else {
        shoelace(&poly).max(0.0)
    }
}

/// Oriented 3D IoU: BEV polygon overlap times vertical overlap.
pub fn box_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let z_lo = (a.center.z - 0.5 * a.dims[2]).max(b.center.z - 0.5 * b.dims[2]);
    let z_hi = (a.center.z + 0.5 * a.dims[2]).min(b.center.z + 0.5 * b.dims[2]);
    let h = (z_hi - z_lo).max(0.0);
    if h == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * h;
    let union = a.volume() + b.volume() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn bev_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center.xy() - b.center.xy()).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Iou,
    BevDistance,
}

impl Criterion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::Iou => "iou",
            Criterion::BevDistance => "bev_distance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchSpec {
    pub criteria: Vec<Criterion>,
    /// IoU threshold per evaluation class.
    pub iou_thresholds: BTreeMap<String, f64>,
    /// For classes missing from `iou_thresholds`.
    pub default_iou_threshold: f64,
    /// Meters, ascending.
    pub distance_thresholds: Vec<f64>,
    pub fov_mask: bool,
    /// Bin edges in meters, ascending from 0; the last bin is open-ended.
    pub range_bins: Vec<f64>,
    /// Evaluation class → member categories.
    pub class_groups: BTreeMap<String, Vec<String>>,
}

impl Default for MatchSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            criteria: vec![Criterion::Iou, Criterion::BevDistance],
            iou_thresholds: [("vehicle", 0.7), ("pedestrian", 0.5), ("cyclist", 0.5)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            default_iou_threshold: 0.5,
            distance_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            fov_mask: true,
            range_bins: vec![0.0, 30.0, 50.0],
            class_groups: [
                ("vehicle", s(&["car", "truck", "bus", "other-vehicle"])),
                ("cyclist", s(&["bicycle", "cyclist", "motorcyclist"])),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        }
    }
}

fn ascending_positive(v: &[f64]) -> bool {
    v.iter().all(|x| *x > 0.0 && x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

impl MatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !ascending_positive(&self.distance_thresholds) || self.distance_thresholds.is_empty() {
            return Err(Error::Config(
                "distance_thresholds must be positive and ascending".into(),
            ));
        }
        let ious = self
            .iou_thresholds
            .values()
            .chain(std::iter::once(&self.default_iou_threshold));
        if ious.clone().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("IoU thresholds must be in (0, 1]".into()));
        }
        if self.range_bins.first() != Some(&0.0) || !ascending_positive(&self.range_bins[1..]) {
            return Err(Error::Config("range_bins must start at 0 and ascend".into()));
        }
        if self.criteria.is_empty() {
            return Err(Error::Config("no evaluation criteria".into()));
        }
        Ok(())
    }

    /// Evaluation class of a category (its group, else itself).
    pub fn eval_class(&self, category: &str) -> String {
        for (group, members) in &self.class_groups {
            if group == category || members.iter().any(|m| m == category) {
                return group.clone();
            }
        }
        category.to_string()
    }

    pub fn iou_threshold(&self, class: &str) -> f64 {
        self.iou_thresholds
            .get(class)
            .copied()
            .unwrap_or(self.default_iou_threshold)
    }

    /// Index of the half-open bin `[lo, hi)` containing `range`.
    pub fn range_bin(&self, range: f64) -> usize {
        self.range_bins.partition_point(|&edge| edge <= range).saturating_sub(1)
    }

    pub fn range_label(&self, bin: usize) -> String {
        match self.range_bins.get(bin + 1) {
            Some(hi) => format!("{}-{}m", self.range_bins[bin], hi),
            None => format!("{}m+", self.range_bins[bin]),
        }
    }
}

/// A box to evaluate (prediction or truth), in its frame's LiDAR coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_index: u32,
    pub instance_id: u32,
    pub category: String,
    pub bbox: Box3D,
    pub confidence: f64,
}

/// Camera FOV test: the center projects into at least one image.
pub fn in_fov(center: &Point, calibs: &[CameraCalibration]) -> bool {
    calibs.iter().any(|c| to_pixel(&to_camera(center, c), c).is_some())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// (pred index, truth index, cost): distance or IoU.
    pub pairs: Vec<(usize, usize, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn pair_cost(criterion: Criterion, p: &Box3D, t: &Box3D) -> f64 {
    match criterion {
        Criterion::Iou => box_iou_3d(p, t),
        Criterion::BevDistance => bev_distance(p, t),
    }
}

fn accepted(criterion: Criterion, cost: f64, threshold: f64) -> bool {
    match criterion {
        Criterion::Iou => cost >= threshold,
        Criterion::BevDistance => cost <= threshold,
    }
}

/// Greedy one-to-one matching within one frame and class: candidate pairs
/// within threshold by ascending distance (descending IoU); ties by pred
/// then truth index.
pub fn match_detections(preds: &[&Box3D], truths: &[&Box3D], criterion: Criterion, threshold: f64) -> Matching {
    greedy(preds, truths, None, criterion, threshold)
}

fn greedy(
    preds: &[&Box3D],
    truths: &[&Box3D],
    confidence: Option<&[f64]>,
    criterion: Criterion,
    threshold: f64,
) -> Matching {
    let mut cand = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let c = pair_cost(criterion, p, t);
            if accepted(criterion, c, threshold) {
                cand.push((i, j, c));
            }
        }
    }
    let key = |c: f64| match criterion {
        Criterion::Iou => -c,
        Criterion::BevDistance => c,
    };
    cand.sort_by(|a, b| {
        let conf = confidence.map_or(std::cmp::Ordering::Equal, |cf| cf[b.0].total_cmp(&cf[a.0]));
        conf.then(key(a.2).total_cmp(&key(b.2)))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut used_p = vec![false; preds.len()];
    let mut used_t = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for (i, j, c) in cand {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            pairs.push((i, j, c));
        }
    }
    Matching {
        tp: pairs.len(),
        fp: preds.len() - pairs.len(),
        fn_: truths.len() - pairs.len(),
        pairs,
    }
}

/// Detections grouped by (eval class, frame).
type Grouped<'a> = BTreeMap<String, BTreeMap<u32, Vec<&'a Detection>>>;

fn group<'a>(dets: &'a [Detection], spec: &MatchSpec, keep: &dyn Fn(&Detection) -> bool) -> Grouped<'a> {
    let mut out: Grouped = BTreeMap::new();
    for d in dets.iter().filter(|d| keep(d)) {
        out.entry(spec.eval_class(&d.category))
            .or_default()
            .entry(d.frame_index)
            .or_default()
            .push(d);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn recall(&self) -> Option<f64> {
        let n = self.tp + self.fn_;
        (n > 0).then(|| self.tp as f64 / n as f64)
    }
}

fn count_class(
    preds: Option<&BTreeMap<u32, Vec<&Detection>>>,
    truths: Option<&BTreeMap<u32, Vec<&Detection>>>,
    criterion: Criterion,
    threshold: f64,
) -> Counts {
    let frames: BTreeSet<u32> = preds
        .iter()
        .chain(truths.iter())
        .flat_map(|m| m.keys().copied())
        .collect();
    let empty = Vec::new();
    let mut c = Counts::default();
    for f in frames {
        let p: Vec<&Box3D> = preds
            .and_then(|m| m.get(&f))
            .unwrap_or(&empty)
            .iter()
            .map(|d| &d.bbox)
            .collect();
        let t: Vec<&Box3D> = truths
            .and_then(|m| m.get(&f))
            .unwrap_or(&empty)
            .iter()
            .map(|d| &d.bbox)
            .collect();
        let m = match_detections(&p, &t, criterion, threshold);
        c.tp += m.tp;
        c.fp += m.fp;
        c.fn_ += m.fn_;
    }
    c
}

/// Recall per distance threshold and their arithmetic mean, per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub per_threshold: Vec<f64>,
    pub average: f64,
    pub num_truths: usize,
}

pub fn recall_avg(preds: &[Detection], truths: &[Detection], spec: &MatchSpec) -> BTreeMap<String, RecallRow> {
    let gp = group(preds, spec, &|_| true);
    let gt = group(truths, spec, &|_| true);
    let mut out = BTreeMap::new();
    for (class, t) in &gt {
        let per_threshold: Vec<f64> = spec
            .distance_thresholds
            .iter()
            .map(|&th| {
                count_class(gp.get(class), Some(t), Criterion::BevDistance, th)
                    .recall()
                    .unwrap_or(0.0)
            })
            .collect();
        let average = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
        out.insert(
            class.clone(),
            RecallRow {
                per_threshold,
                average,
                num_truths: t.values().map(|v| v.len()).sum(),
            },
        );
    }
    out
}

/// Area under the 101-point interpolated precision/recall curve. Predictions
/// are matched in descending confidence order.
pub fn average_precision_at(
    preds: Option<&BTreeMap<u32, Vec<&Detection>>>,
    truths: Option<&BTreeMap<u32, Vec<&Detection>>>,
    criterion: Criterion,
    threshold: f64,
) -> f64 {
    let n_truth: usize = truths.map_or(0, |m| m.values().map(|v| v.len()).sum());
    if n_truth == 0 {
        return 0.0;
    }
    let Some(preds) = preds else { return 0.0 };
    let empty = Vec::new();
    // (confidence, is_tp) for every prediction
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (f, p) in preds {
        let t: Vec<&Box3D> = truths
            .and_then(|m| m.get(f))
            .unwrap_or(&empty)
            .iter()
            .map(|d| &d.bbox)
            .collect();
        let boxes: Vec<&Box3D> = p.iter().map(|d| &d.bbox).collect();
        let conf: Vec<f64> = p.iter().map(|d| d.confidence).collect();
        let m = greedy(&boxes, &t, Some(&conf), criterion, threshold);
        let mut tp = vec![false; p.len()];
        for (i, _, _) in &m.pairs {
            tp[*i] = true;
        }
        scored.extend(conf.into_iter().zip(tp));
    }
    // stable: equal confidences keep true positives first
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut curve = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, hit) in &scored {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / n_truth as f64, tp as f64 / (tp + fp) as f64));
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn threshold_for(spec: &MatchSpec, criterion: Criterion, class: &str) -> Vec<f64> {
    match criterion {
        Criterion::Iou => vec![spec.iou_threshold(class)],
        Criterion::BevDistance => spec.distance_thresholds.clone(),
    }
}

/// AP per class; under the distance criterion it is averaged over the
/// distance thresholds.
pub fn average_precision(
    preds: &[Detection],
    truths: &[Detection],
    spec: &MatchSpec,
    criterion: Criterion,
) -> BTreeMap<String, f64> {
    let gp = group(preds, spec, &|_| true);
    let gt = group(truths, spec, &|_| true);
    gt.iter()
        .map(|(class, t)| {
            let ths = threshold_for(spec, criterion, class);
            let ap = ths
                .iter()
                .map(|&th| average_precision_at(gp.get(class), Some(t), criterion, th))
                .sum::<f64>()
                / ths.len() as f64;
            (class.clone(), ap)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub class: String,
    pub ap: f64,
    /// Recall at the class IoU threshold, or averaged over distances.
    pub recall: f64,
    pub num_truths: usize,
    pub num_preds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionTable {
    pub criterion: Criterion,
    pub rows: Vec<DetectionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    pub class: String,
    pub bin: String,
    /// Distance-criterion recall, averaged over thresholds.
    pub recall: f64,
    pub num_truths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub tables: Vec<CriterionTable>,
    pub ranges: Vec<RangeRow>,
}

fn criterion_table(
    preds: &[&Detection],
    truths: &[&Detection],
    spec: &MatchSpec,
    criterion: Criterion,
) -> CriterionTable {
    let p: Vec<Detection> = preds.iter().map(|d| (*d).clone()).collect();
    let t: Vec<Detection> = truths.iter().map(|d| (*d).clone()).collect();
    let gp = group(&p, spec, &|_| true);
    let gt = group(&t, spec, &|_| true);
    let rows = gt
        .iter()
        .map(|(class, tc)| {
            let ths = threshold_for(spec, criterion, class);
            let k = ths.len() as f64;
            let ap = ths
                .iter()
                .map(|&th| average_precision_at(gp.get(class), Some(tc), criterion, th))
                .sum::<f64>()
                / k;
            let recall = ths
                .iter()
                .map(|&th| {
                    count_class(gp.get(class), Some(tc), criterion, th)
                        .recall()
                        .unwrap_or(0.0)
                })
                .sum::<f64>()
                / k;
            DetectionRow {
                class: class.clone(),
                ap,
                recall,
                num_truths: tc.values().map(|v| v.len()).sum(),
                num_preds: gp.get(class).map_or(0, |m| m.values().map(|v| v.len()).sum()),
            }
        })
        .collect();
    CriterionTable { criterion, rows }
}

/// Truths and predictions binned by BEV range from the ego; each bin is
/// matched independently.
pub fn range_breakdown(preds: &[Detection], truths: &[Detection], spec: &MatchSpec) -> Vec<RangeRow> {
    let bin = |d: &Detection| spec.range_bin(d.bbox.center.coords.xy().norm());
    let mut out = Vec::new();
    for b in 0..spec.range_bins.len() {
        let p: Vec<Detection> = preds.iter().filter(|d| bin(d) == b).cloned().collect();
        let t: Vec<Detection> = truths.iter().filter(|d| bin(d) == b).cloned().collect();
        for (class, row) in recall_avg(&p, &t, spec) {
            out.push(RangeRow {
                class,
                bin: spec.range_label(b),
                recall: row.average,
                num_truths: row.num_truths,
            });
        }
    }
    out
}

/// Full detection evaluation. With `fov_mask` on, boxes whose centers fall
/// outside every camera are dropped from both sides first.
pub fn evaluate_detections(
    preds: &[Detection],
    truths: &[Detection],
    spec: &MatchSpec,
    calibs: &[CameraCalibration],
) -> DetectionReport {
    let keep = |d: &&Detection| !spec.fov_mask || in_fov(&d.bbox.center, calibs);
    let p: Vec<&Detection> = preds.iter().filter(keep).collect();
    let t: Vec<&Detection> = truths.iter().filter(keep).collect();
    let tables = spec
        .criteria
        .iter()
        .map(|&c| criterion_table(&p, &t, spec, c))
        .collect();
    let pc: Vec<Detection> = p.into_iter().cloned().collect();
    let tc: Vec<Detection> = t.into_iter().cloned().collect();
    DetectionReport {
        tables,
        ranges: range_breakdown(&pc, &tc, spec),
    }
}

/// Per-point semantic IoU. Points without a truth label are ignored; classes
/// absent from the truth are excluded.
pub fn segmentation_miou(pred: &[Option<u16>], truth: &[Option<u16>], classes: &[u16]) -> Result<MiouReport> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "segmentation length mismatch: {} predicted vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let wanted = |c: u16| classes.is_empty() || classes.contains(&c);
    let mut inter: BTreeMap<u16, u64> = BTreeMap::new();
    let mut union: BTreeMap<u16, u64> = BTreeMap::new();
    let mut present: BTreeSet<u16> = BTreeSet::new();
    for (p, t) in pred.iter().zip(truth) {
        let Some(t) = *t else { continue };
        present.insert(t);
        if *p == Some(t) {
            *inter.entry(t).or_insert(0) += 1;
            *union.entry(t).or_insert(0) += 1;
        } else {
            *union.entry(t).or_insert(0) += 1;
            if let Some(p) = p {
                *union.entry(*p).or_insert(0) += 1;
            }
        }
    }
    let per_class: Vec<crate::occupancy::ClassIou> = present
        .into_iter()
        .filter(|&c| wanted(c))
        .map(|c| {
            let (i, u) = (inter.get(&c).copied().unwrap_or(0), union[&c]);
            crate::occupancy::ClassIou {
                semantic_id: c,
                iou: i as f64 / u as f64,
                intersection: i,
                union: u,
            }
        })
        .collect();
    let miou = (!per_class.is_empty()).then(|| per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64);
    Ok(MiouReport { per_class, miou })
}

/// Mean IoU over the member classes present in the report.
pub fn merged_iou(report: &MiouReport, members: &[u16]) -> Option<f64> {
    let v: Vec<f64> = report
        .per_class
        .iter()
        .filter(|c| members.contains(&c.semantic_id))
        .map(|c| c.iou)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Plain-text tables: one detection table per criterion, then ranges.
pub fn render_detection_report(r: &DetectionReport, spec: &MatchSpec) -> String {
    let mut s = String::new();
    for t in &r.tables {
        let what = match t.criterion {
            Criterion::Iou => "IoU".to_string(),
            Criterion::BevDistance => format!("BEV distance, thresholds {:?} m", spec.distance_thresholds),
        };
        let _ = writeln!(s, "Detection ({what})");
        let _ = writeln!(
            s,
            "  {:<14} {:>8} {:>8} {:>8} {:>8}",
            "class", "AP", "Recall", "truths", "preds"
        );
        for row in &t.rows {
            let _ = writeln!(
                s,
                "  {:<14} {:>8.2} {:>8.2} {:>8} {:>8}",
                row.class,
                100.0 * row.ap,
                100.0 * row.recall,
                row.num_truths,
                row.num_preds
            );
        }
        s.push('\n');
    }
    let _ = writeln!(s, "Recall by range (BEV distance)");
    let _ = writeln!(s, "  {:<14} {:>10} {:>8} {:>8}", "class", "range", "Recall", "truths");
    for row in &r.ranges {
        let _ = writeln!(
            s,
            "  {:<14} {:>10} {:>8.2} {:>8}",
            row.class,
            row.bin,
            100.0 * row.recall,
            row.num_truths
        );
    }
    s
}
