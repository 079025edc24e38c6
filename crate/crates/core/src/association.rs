//! Cross-view instance association.
//!
//! Per-view tracking ids are unified into global instance ids by scoring mask
//! pairs of neighboring views with a mix of appearance (cosine of unit
//! features) and location (horizontal distance in the concatenated panorama),
//! then solving an optimal one-to-one assignment per view pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_matching;
use crate::error::{Error, Result};
use crate::scene::{CameraCalibration, MaskTrack2D, SceneBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationParams {
    /// Weight of the appearance term; the location term gets the rest.
    pub appearance_weight: f64,
    /// Location scale σ as a fraction of the panorama width.
    pub location_scale_fraction: f64,
    pub match_threshold: f64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self {
            appearance_weight: 0.5,
            location_scale_fraction: 0.05,
            match_threshold: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationConfig {
    pub appearance_weight: f64,
    /// σ in pixels.
    pub location_scale: f64,
    pub match_threshold: f64,
    pub panorama_width: f64,
}

impl AssociationConfig {
    pub fn new(params: &AssociationParams, calibs: &[CameraCalibration]) -> Result<Self> {
        let panorama_width = panorama_width(calibs);
        let cfg = Self {
            appearance_weight: params.appearance_weight,
            location_scale: params.location_scale_fraction * panorama_width,
            match_threshold: params.match_threshold,
            panorama_width,
        };
        if !(0.0..=1.0).contains(&cfg.appearance_weight) {
            return Err(Error::Config(format!(
                "appearance_weight {} outside [0, 1]",
                cfg.appearance_weight
            )));
        }
        if !(cfg.location_scale > 0.0) {
            return Err(Error::Config("location scale must be positive".into()));
        }
        Ok(cfg)
    }
}

pub fn panorama_width(calibs: &[CameraCalibration]) -> f64 {
    calibs.iter().map(|c| c.width as f64).sum()
}

/// Horizontal box center in the concatenated panorama.
pub fn panoramic_u(mask: &MaskTrack2D, calibs: &[CameraCalibration]) -> Result<f64> {
    let own = calibs
        .iter()
        .find(|c| c.view_id == mask.view_id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown view `{}`", mask.view_id)))?;
    let offset: f64 = calibs
        .iter()
        .filter(|c| c.panoramic_index < own.panoramic_index)
        .map(|c| c.width as f64)
        .sum();
    Ok(offset + mask.box_center_u())
}

/// A foreground mask reduced to what association needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AssocItem {
    pub view_id: String,
    pub panoramic_index: usize,
    pub local_id: u32,
    pub category: String,
    pub u: f64,
    pub appearance: Vec<f64>,
}

impl AssocItem {
    pub fn from_mask(mask: &MaskTrack2D, calibs: &[CameraCalibration]) -> Result<Option<Self>> {
        let Some(local_id) = mask.instance_id else {
            return Ok(None);
        };
        let view = calibs
            .iter()
            .find(|c| c.view_id == mask.view_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown view `{}`", mask.view_id)))?;
        Ok(Some(Self {
            view_id: mask.view_id.clone(),
            panoramic_index: view.panoramic_index,
            local_id,
            category: mask.category.clone(),
            u: panoramic_u(mask, calibs)?,
            appearance: mask.appearance.clone(),
        }))
    }

    pub fn key(&self) -> TrackKey {
        TrackKey {
            view_id: self.view_id.clone(),
            local_id: self.local_id,
        }
    }
}

/// `w·max(0, ⟨a,b⟩) + (1−w)·exp(−Δu/σ)` with Δu wrapped around the panorama.
pub fn pair_similarity(a: &AssocItem, b: &AssocItem, cfg: &AssociationConfig) -> f64 {
    let cos: f64 = a.appearance.iter().zip(&b.appearance).map(|(x, y)| x * y).sum();
    let direct = (a.u - b.u).abs().rem_euclid(cfg.panorama_width);
    let du = direct.min(cfg.panorama_width - direct);
    cfg.appearance_weight * cos.max(0.0) + (1.0 - cfg.appearance_weight) * (-du / cfg.location_scale).exp()
}

/// Per-view tracking identity: `(view, local instance id)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrackKey {
    pub view_id: String,
    pub local_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLink {
    pub a: TrackKey,
    pub b: TrackKey,
    pub score: f64,
}

/// Assignment result for one neighboring view pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAssignment {
    pub view_a: String,
    pub view_b: String,
    pub total: f64,
    /// Candidate weights (row = view_a item, col = view_b item); `None` = not allowed.
    pub weights: Vec<Option<f64>>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameAssociation {
    /// Groups of keys sharing one instance, each sorted; ordered by first member.
    pub groups: Vec<Vec<TrackKey>>,
    pub links: Vec<PairLink>,
    pub pairs: Vec<PairAssignment>,
}

/// Neighboring view pairs in panoramic order, including the wraparound pair.
pub fn adjacent_view_pairs(calibs: &[CameraCalibration]) -> Vec<(usize, usize)> {
    let n = calibs.len();
    match n {
        0 | 1 => vec![],
        2 => vec![(0, 1)],
        _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
    }
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }
    /// Attaches the larger root under the smaller one so roots stay canonical.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        lo
    }
}

/// Associates the foreground masks of one frame across views.
pub fn associate_frame(items: &[AssocItem], calibs: &[CameraCalibration], cfg: &AssociationConfig) -> FrameAssociation {
    let mut items: Vec<&AssocItem> = items.iter().collect();
    items.sort_by(|a, b| {
        (a.panoramic_index, a.local_id)
            .cmp(&(b.panoramic_index, b.local_id))
            .then_with(|| a.u.total_cmp(&b.u))
    });

    let mut views: Vec<&CameraCalibration> = calibs.iter().collect();
    views.sort_by_key(|c| c.panoramic_index);

    let mut links: Vec<(usize, usize, f64)> = Vec::new();
    let mut pairs = Vec::new();
    for (ia, ib) in adjacent_view_pairs(calibs) {
        let (va, vb) = (&views[ia].view_id, &views[ib].view_id);
        let rows: Vec<usize> = (0..items.len()).filter(|&i| &items[i].view_id == va).collect();
        let cols: Vec<usize> = (0..items.len()).filter(|&i| &items[i].view_id == vb).collect();
        let weights: Vec<Option<f64>> = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| {
                let (a, b) = (items[r], items[c]);
                if a.category != b.category {
                    return None;
                }
                let s = pair_similarity(a, b, cfg);
                (s >= cfg.match_threshold).then_some(s)
            })
            .collect();
        let matched = max_weight_matching(&weights, rows.len(), cols.len());
        let mut total = 0.0;
        for &(r, c) in &matched {
            let s = weights[r * cols.len() + c].unwrap_or(0.0);
            total += s;
            links.push((rows[r], cols[c], s));
        }
        pairs.push(PairAssignment {
            view_a: va.clone(),
            view_b: vb.clone(),
            total,
            weights,
            rows: rows.len(),
            cols: cols.len(),
        });
    }

    // Strongest links first; a merge that would put two masks of one view
    // under the same instance is refused.
    links.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    let mut dsu = Dsu::new(items.len());
    let mut view_sets: Vec<BTreeSet<&str>> = items.iter().map(|it| BTreeSet::from([it.view_id.as_str()])).collect();
    let mut kept = Vec::new();
    for &(a, b, s) in &links {
        let (ra, rb) = (dsu.find(a), dsu.find(b));
        if ra == rb {
            continue;
        }
        if !view_sets[ra].is_disjoint(&view_sets[rb]) {
            continue;
        }
        let root = dsu.union(ra, rb);
        let other = if root == ra { rb } else { ra };
        let moved = std::mem::take(&mut view_sets[other]);
        view_sets[root].extend(moved);
        kept.push(PairLink {
            a: items[a].key(),
            b: items[b].key(),
            score: s,
        });
    }

    let mut groups: BTreeMap<usize, Vec<TrackKey>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        groups.entry(dsu.find(i)).or_default().push(item.key());
    }
    FrameAssociation {
        groups: groups.into_values().collect(),
        links: kept,
        pairs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackBinding {
    pub view_id: String,
    pub local_id: u32,
    pub global_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkScore {
    pub a: TrackKey,
    pub b: TrackKey,
    pub frames_together: u32,
    pub frames_co_present: u32,
    pub mean_score: f64,
}

/// `(view, local id) → global id`, total over every foreground track.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GlobalIdMap {
    pub bindings: Vec<TrackBinding>,
    pub links: Vec<LinkScore>,
    #[serde(skip)]
    index: HashMap<TrackKey, u32>,
}

impl GlobalIdMap {
    pub fn from_bindings(bindings: Vec<TrackBinding>, links: Vec<LinkScore>) -> Self {
        let index = bindings
            .iter()
            .map(|b| {
                (
                    TrackKey {
                        view_id: b.view_id.clone(),
                        local_id: b.local_id,
                    },
                    b.global_id,
                )
            })
            .collect();
        Self { bindings, links, index }
    }

    pub fn global_id(&self, view_id: &str, local_id: u32) -> Option<u32> {
        if self.index.is_empty() && !self.bindings.is_empty() {
            return self
                .bindings
                .iter()
                .find(|b| b.view_id == view_id && b.local_id == local_id)
                .map(|b| b.global_id);
        }
        self.index
            .get(&TrackKey {
                view_id: view_id.to_string(),
                local_id,
            })
            .copied()
    }

    /// Global id of a mask; `None` for stuff masks or unknown tracks.
    pub fn for_mask(&self, mask: &MaskTrack2D) -> Option<u32> {
        mask.instance_id.and_then(|l| self.global_id(&mask.view_id, l))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("id map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: GlobalIdMap = serde_json::from_str(s).map_err(|e| Error::malformed("global_ids.json", "root", e))?;
        Ok(Self::from_bindings(m.bindings, m.links))
    }
}

/// Unifies per-view tracks over the whole sequence.
///
/// Frame-level groups vote for track pairs; a pair is bound when it was
/// grouped in a strict majority of the frames where both tracks exist. Two
/// tracks of one view that co-occur in a frame never share a global id.
pub fn unify_sequence(bundle: &SceneBundle, cfg: &AssociationConfig) -> Result<GlobalIdMap> {
    let calibs = &bundle.calibrations;
    let mut presence: BTreeMap<TrackKey, BTreeSet<u32>> = BTreeMap::new();
    let mut first_seen: BTreeMap<TrackKey, (u32, usize)> = BTreeMap::new();
    let mut together: BTreeMap<(TrackKey, TrackKey), (u32, f64, u32)> = BTreeMap::new();

    for (frame, masks) in bundle.masks_by_frame() {
        let mut items = Vec::new();
        for m in masks {
            if let Some(it) = AssocItem::from_mask(m, calibs)? {
                items.push(it);
            }
        }
        for it in &items {
            presence.entry(it.key()).or_default().insert(frame);
            first_seen.entry(it.key()).or_insert((frame, it.panoramic_index));
        }
        let fa = associate_frame(&items, calibs, cfg);
        let direct: HashMap<(TrackKey, TrackKey), f64> = fa
            .links
            .iter()
            .map(|l| (ordered(l.a.clone(), l.b.clone()), l.score))
            .collect();
        for g in &fa.groups {
            for i in 0..g.len() {
                for j in i + 1..g.len() {
                    let key = ordered(g[i].clone(), g[j].clone());
                    let e = together.entry(key.clone()).or_insert((0, 0.0, 0));
                    e.0 += 1;
                    if let Some(s) = direct.get(&key) {
                        e.1 += s;
                        e.2 += 1;
                    }
                }
            }
        }
    }

    let keys: Vec<TrackKey> = presence.keys().cloned().collect();
    let pos: HashMap<&TrackKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();

    let mut candidates = Vec::new();
    for ((a, b), (n, score_sum, scored)) in &together {
        let co = presence[a].intersection(&presence[b]).count() as u32;
        if 2 * n > co {
            candidates.push(LinkScore {
                a: a.clone(),
                b: b.clone(),
                frames_together: *n,
                frames_co_present: co,
                mean_score: if *scored > 0 { score_sum / *scored as f64 } else { 0.0 },
            });
        }
    }
    candidates.sort_by(|x, y| {
        y.frames_together
            .cmp(&x.frames_together)
            .then(y.mean_score.total_cmp(&x.mean_score))
            .then((&x.a, &x.b).cmp(&(&y.a, &y.b)))
    });

    let mut dsu = Dsu::new(keys.len());
    let mut members: Vec<Vec<usize>> = (0..keys.len()).map(|i| vec![i]).collect();
    let mut links = Vec::new();
    for c in candidates {
        let (ra, rb) = (dsu.find(pos[&c.a]), dsu.find(pos[&c.b]));
        if ra == rb {
            continue;
        }
        let conflict = members[ra].iter().any(|&i| {
            members[rb]
                .iter()
                .any(|&j| keys[i].view_id == keys[j].view_id && !presence[&keys[i]].is_disjoint(&presence[&keys[j]]))
        });
        if conflict {
            continue;
        }
        let root = dsu.union(ra, rb);
        let other = if root == ra { rb } else { ra };
        let moved = std::mem::take(&mut members[other]);
        members[root].extend(moved);
        links.push(c);
    }

    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..keys.len() {
        comps.entry(dsu.find(i)).or_default().push(i);
    }
    let mut ordered_comps: Vec<Vec<usize>> = comps.into_values().collect();
    ordered_comps.sort_by_key(|c| {
        c.iter()
            .map(|&i| (first_seen[&keys[i]].0, first_seen[&keys[i]].1, keys[i].local_id))
            .min()
    });
    let mut bindings = Vec::new();
    for (g, comp) in ordered_comps.iter().enumerate() {
        for &i in comp {
            bindings.push(TrackBinding {
                view_id: keys[i].view_id.clone(),
                local_id: keys[i].local_id,
                global_id: g as u32 + 1,
            });
        }
    }
    bindings.sort_by(|a, b| (&a.view_id, a.local_id).cmp(&(&b.view_id, b.local_id)));
    Ok(GlobalIdMap::from_bindings(bindings, links))
}

fn ordered(a: TrackKey, b: TrackKey) -> (TrackKey, TrackKey) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::tests::brute_force_best;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig(n: usize, width: u32) -> Vec<CameraCalibration> {
        (0..n)
            .map(|i| CameraCalibration {
                view_id: format!("v{i}"),
                rotation: Matrix3::identity(),
                translation: Vector3::zeros(),
                fx: 500.0,
                fy: 500.0,
                cx: width as f64 / 2.0,
                cy: 400.0,
                width,
                height: 800,
                panoramic_index: i,
            })
            .collect()
    }

    fn mask(view: &str, local: u32, cat: &str, u0: f64, u1: f64, feat: Vec<f64>) -> MaskTrack2D {
        MaskTrack2D {
            view_id: view.into(),
            frame_index: 0,
            mask_index: local as u16,
            instance_id: Some(local),
            category: cat.into(),
            pixels: vec![],
            box2d: [u0, 10.0, u1, 20.0],
            appearance: feat,
            confidence: 1.0,
        }
    }

    fn item(view: usize, local: u32, u: f64, feat: Vec<f64>) -> AssocItem {
        AssocItem {
            view_id: format!("v{view}"),
            panoramic_index: view,
            local_id: local,
            category: "car".into(),
            u,
            appearance: feat,
        }
    }

    fn cfg(calibs: &[CameraCalibration]) -> AssociationConfig {
        AssociationConfig::new(&AssociationParams::default(), calibs).unwrap()
    }

    #[test]
    fn panoramic_offsets() {
        let calibs = rig(2, 1920);
        let m0 = mask("v0", 1, "car", 90.0, 110.0, vec![1.0]);
        let m1 = mask("v1", 1, "car", 90.0, 110.0, vec![1.0]);
        assert_eq!(panoramic_u(&m0, &calibs).unwrap(), 100.0);
        assert_eq!(panoramic_u(&m1, &calibs).unwrap(), 2020.0);
        let bad = mask("nope", 1, "car", 0.0, 1.0, vec![1.0]);
        assert!(panoramic_u(&bad, &calibs).is_err());
    }

    #[test]
    fn straddling_object_coordinates_are_close() {
        // a 300 px wide object cut by the view boundary: 120 px left, 180 px right
        let calibs = rig(2, 1920);
        let left = mask("v0", 1, "car", 1800.0, 1920.0, vec![1.0]);
        let right = mask("v1", 4, "car", 0.0, 180.0, vec![1.0]);
        let du = (panoramic_u(&left, &calibs).unwrap() - panoramic_u(&right, &calibs).unwrap()).abs();
        assert!(du < 300.0, "{du}");
    }

    #[test]
    fn similarity_closed_forms() {
        let calibs = rig(2, 1000);
        let c = cfg(&calibs);
        let a = item(0, 1, 500.0, vec![1.0, 0.0]);
        assert_eq!(pair_similarity(&a, &a, &c), 1.0);
        let b = item(1, 1, 500.0 + 10.0 * c.location_scale, vec![0.0, 1.0]);
        // wrapped distance equals direct distance here (10σ = 1000 = W/2)
        let expected = 0.5 * (-10.0f64).exp();
        assert!((pair_similarity(&a, &b, &c) - expected).abs() < 1e-15);
        assert!((expected - 2.27e-5).abs() < 1e-7);
    }

    #[test]
    fn wraparound_distance() {
        let calibs = rig(3, 1000);
        let c = cfg(&calibs);
        let a = item(0, 1, 10.0, vec![0.0, 1.0]);
        let b = item(2, 1, 2990.0, vec![1.0, 0.0]);
        let expected = 0.5 * (-20.0 / c.location_scale).exp();
        assert!((pair_similarity(&a, &b, &c) - expected).abs() < 1e-15);
    }

    #[test]
    fn near_identical_features_resolved_by_distance() {
        let calibs = rig(2, 1000);
        let c = cfg(&calibs);
        let v1 = vec![0.6, 0.8];
        let v5 = vec![0.6001, 0.79992];
        let q = item(1, 1, 1020.0, vec![0.6, 0.8]);
        let near = item(0, 1, 980.0, v1);
        let far = item(0, 5, 400.0, v5);
        assert!(pair_similarity(&q, &near, &c) > pair_similarity(&q, &far, &c));
    }

    #[test]
    fn single_view_gets_distinct_ids() {
        let calibs = rig(1, 1000);
        let items = vec![item(0, 3, 100.0, vec![1.0]), item(0, 1, 300.0, vec![1.0])];
        let fa = associate_frame(&items, &calibs, &cfg(&calibs));
        assert_eq!(fa.groups.len(), 2);
        assert!(fa.links.is_empty());
    }

    #[test]
    fn two_view_object_merges() {
        let calibs = rig(2, 1000);
        let f = vec![0.0, 1.0, 0.0];
        let items = vec![item(0, 7, 960.0, f.clone()), item(1, 2, 1030.0, f)];
        let fa = associate_frame(&items, &calibs, &cfg(&calibs));
        assert_eq!(fa.groups.len(), 1);
        assert_eq!(fa.groups[0].len(), 2);
    }

    #[test]
    fn identical_traffic_lights_matched_by_location() {
        let calibs = rig(2, 1000);
        let f = vec![1.0, 0.0];
        let items = vec![
            item(0, 8, 900.0, f.clone()),
            item(0, 9, 960.0, f.clone()),
            item(0, 10, 990.0, f.clone()),
            item(1, 1, 1005.0, f.clone()),
            item(1, 2, 1038.0, f.clone()),
            item(1, 3, 1105.0, f),
        ];
        let fa = associate_frame(&items, &calibs, &cfg(&calibs));
        let expect = [(8, 3), (9, 2), (10, 1)];
        for (l0, l1) in expect {
            assert!(
                fa.groups.iter().any(|g| g.contains(&TrackKey {
                    view_id: "v0".into(),
                    local_id: l0
                }) && g.contains(&TrackKey {
                    view_id: "v1".into(),
                    local_id: l1
                })),
                "expected {l0}<->{l1} in {:?}",
                fa.groups
            );
        }
    }

    #[test]
    fn category_mismatch_never_matches() {
        let calibs = rig(2, 1000);
        let mut a = item(0, 1, 990.0, vec![1.0]);
        a.category = "pedestrian".into();
        let b = item(1, 1, 1010.0, vec![1.0]);
        let fa = associate_frame(&[a, b], &calibs, &cfg(&calibs));
        assert_eq!(fa.groups.len(), 2);
    }

    fn random_items(rng: &mut ChaCha8Rng, views: usize) -> Vec<AssocItem> {
        let mut out = Vec::new();
        for v in 0..views {
            let n = rng.random_range(0..=6);
            for l in 0..n {
                let mut f: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                f.iter_mut().for_each(|x| *x /= norm);
                out.push(item(
                    v,
                    l as u32 + 1,
                    v as f64 * 1000.0 + rng.random_range(0.0..1000.0),
                    f,
                ));
            }
        }
        out
    }

    #[test]
    fn per_pair_totals_equal_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let calibs = rig(3, 1000);
            let items = random_items(&mut rng, 3);
            let fa = associate_frame(&items, &calibs, &cfg(&calibs));
            for p in &fa.pairs {
                let best = brute_force_best(&p.weights, p.rows, p.cols);
                assert!((p.total - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permutation_invariant_and_no_self_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let calibs = rig(4, 1000);
            let items = random_items(&mut rng, 4);
            let c = cfg(&calibs);
            let base = associate_frame(&items, &calibs, &c).groups;
            let mut shuffled = items.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(base, associate_frame(&shuffled, &calibs, &c).groups);
            for g in &base {
                let views: BTreeSet<_> = g.iter().map(|k| &k.view_id).collect();
                assert_eq!(views.len(), g.len());
            }
        }
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric(
            ua in 0.0f64..3000.0, ub in 0.0f64..3000.0,
            fa in prop::collection::vec(-1.0f64..1.0, 5),
            fb in prop::collection::vec(-1.0f64..1.0, 5),
            w in 0.0f64..1.0,
        ) {
            let calibs = rig(3, 1000);
            let mut c = cfg(&calibs);
            c.appearance_weight = w;
            let a = item(0, 1, ua, fa);
            let b = item(1, 1, ub, fb);
            prop_assert_eq!(pair_similarity(&a, &b, &c), pair_similarity(&b, &a, &c));
        }
    }

    fn seq_bundle(tracks: &[(&str, u32, std::ops::Range<u32>, f64, Vec<f64>)]) -> SceneBundle {
        let calibs = rig(2, 1000);
        let mut masks = Vec::new();
        for (view, local, frames, u, f) in tracks {
            for fr in frames.clone() {
                let mut m = mask(view, *local, "car", u - 20.0, u + 20.0, f.clone());
                m.frame_index = fr;
                masks.push(m);
            }
        }
        SceneBundle {
            calibrations: calibs,
            mask_tracks: masks,
            vocabulary: vec!["car".into()],
            ..Default::default()
        }
    }

    #[test]
    fn one_view_track_gets_one_global_id() {
        let b = seq_bundle(&[("v0", 4, 0..10, 500.0, vec![1.0, 0.0])]);
        let map = unify_sequence(&b, &cfg(&b.calibrations)).unwrap();
        assert_eq!(map.bindings.len(), 1);
        assert_eq!(map.global_id("v0", 4), Some(1));
    }

    #[test]
    fn crossing_track_spans_both_views() {
        // frames 0..6 in v0 only, 4..6 straddling the seam, 6..10 in v1 only
        let f = vec![0.0, 1.0];
        let b = seq_bundle(&[("v0", 3, 0..6, 985.0, f.clone()), ("v1", 8, 4..10, 15.0, f)]);
        let map = unify_sequence(&b, &cfg(&b.calibrations)).unwrap();
        assert_eq!(map.global_id("v0", 3), map.global_id("v1", 8));
        assert_eq!(map.links.len(), 1);
    }

    #[test]
    fn objects_never_together_stay_distinct() {
        let b = seq_bundle(&[
            ("v0", 1, 0..10, 200.0, vec![1.0, 0.0]),
            ("v1", 1, 0..10, 700.0, vec![0.0, 1.0]),
        ]);
        let map = unify_sequence(&b, &cfg(&b.calibrations)).unwrap();
        assert_ne!(map.global_id("v0", 1), map.global_id("v1", 1));
    }

    #[test]
    fn id_map_json_round_trip() {
        let f = vec![0.0, 1.0];
        let b = seq_bundle(&[("v0", 3, 0..6, 985.0, f.clone()), ("v1", 8, 4..10, 15.0, f)]);
        let map = unify_sequence(&b, &cfg(&b.calibrations)).unwrap();
        let back = GlobalIdMap::from_json(&map.to_json()).unwrap();
        assert_eq!(back.global_id("v1", 8), map.global_id("v1", 8));
    }
}
