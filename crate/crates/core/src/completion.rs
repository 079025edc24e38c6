//! Partial/complete training-pair tooling, Chamfer distance and the
//! completion plug-in interface with a mirror baseline.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxes::{l_shape_fit, Box3D};
use crate::error::{Error, Result};
use crate::geometry::{rotation_z, Point};
use crate::hull::hull_vertices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Complete,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletenessReport {
    pub occupied_grid_ratio: f64,
    pub resolution: f64,
    pub verdict: Verdict,
}

/// Occupied fraction of the box lattice (`ceil(dim / resolution)` cells per
/// axis). Points outside the box are ignored.
pub fn completeness(points: &[Point], bbox: &Box3D, resolution: f64, threshold: f64) -> Result<CompletenessReport> {
    if points.is_empty() {
        return Err(Error::InvalidInput("completeness of an empty point set".into()));
    }
    if !(resolution > 0.0) {
        return Err(Error::Config("completeness resolution must be positive".into()));
    }
    let n: [usize; 3] = bbox.dims.map(|d| ((d / resolution).ceil() as usize).max(1));
    let mut occupied = HashSet::new();
    for p in points {
        let l = bbox.to_local(p);
        let mut cell = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let x = l[a] + 0.5 * bbox.dims[a];
            if x < -1e-9 || x > bbox.dims[a] + 1e-9 {
                inside = false;
                break;
            }
            cell[a] = ((x / resolution).floor().max(0.0) as usize).min(n[a] - 1);
        }
        if inside {
            occupied.insert(cell);
        }
    }
    let ratio = occupied.len() as f64 / (n[0] * n[1] * n[2]) as f64;
    Ok(CompletenessReport {
        occupied_grid_ratio: ratio,
        resolution,
        verdict: if ratio >= threshold {
            Verdict::Complete
        } else {
            Verdict::Partial
        },
    })
}

/// Greedy farthest-point sampling from `seed_index`; returns indices in
/// selection order. Ties go to the smallest index.
pub fn fps(points: &[Point], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::InvalidInput(format!("fps of {m} from {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= n {
        return Err(Error::InvalidInput(format!("fps seed {seed_index} out of {n}")));
    }
    let mut out = Vec::with_capacity(m);
    let (xs, ys, zs): (Vec<f64>, Vec<f64>, Vec<f64>) = (
        points.iter().map(|p| p.x).collect(),
        points.iter().map(|p| p.y).collect(),
        points.iter().map(|p| p.z).collect(),
    );
    // selected points hold -inf and can never win again
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = seed_index;
    for _ in 0..m {
        out.push(cur);
        dist[cur] = f64::NEG_INFINITY;
        let (px, py, pz) = (xs[cur], ys[cur], zs[cur]);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let (dx, dy, dz) = (xs[i] - px, ys[i] - py, zs[i] - pz);
            let d = dist[i].min(dx * dx + dy * dy + dz * dz);
            dist[i] = d;
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        cur = best;
    }
    Ok(out)
}

/// Removes `removal_fraction` of the points, least visible first.
///
/// Visibility comes from hidden-point removal: points are spherically flipped
/// about the viewpoint and those not on the convex hull of the flipped set
/// (plus the viewpoint) are hidden. Hidden points go first, farthest from the
/// viewpoint first; any remainder is seeded random dropout among the visible.
/// Output keeps input order.
pub fn make_partial(points: &[Point], viewpoint: &Point, removal_fraction: f64, seed: u64) -> Vec<Point> {
    let n = points.len();
    let target = ((removal_fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    if target == 0 {
        return points.to_vec();
    }
    let rel: Vec<Vector3<f64>> = points.iter().map(|p| p - viewpoint).collect();
    let rmax = rel.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    let radius = rmax * 100.0;
    let mut flipped: Vec<Point> = rel
        .iter()
        .map(|v| {
            let d = v.norm();
            if d > 0.0 {
                Point::from(v + 2.0 * (radius - d) * v / d)
            } else {
                Point::origin()
            }
        })
        .collect();
    flipped.push(Point::origin());
    let visible: HashSet<usize> = hull_vertices(&flipped).into_iter().filter(|&i| i < n).collect();

    let mut hidden: Vec<usize> = (0..n).filter(|i| !visible.contains(i)).collect();
    hidden.sort_by(|&a, &b| rel[b].norm().total_cmp(&rel[a].norm()).then(a.cmp(&b)));
    let mut removed = vec![false; n];
    for &i in hidden.iter().take(target) {
        removed[i] = true;
    }
    let rest = target.saturating_sub(hidden.len());
    if rest > 0 {
        let mut vis: Vec<usize> = visible.into_iter().collect();
        vis.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vis.shuffle(&mut rng);
        for &i in vis.iter().take(rest) {
            removed[i] = true;
        }
    }
    points
        .iter()
        .zip(&removed)
        .filter(|(_, r)| !**r)
        .map(|(p, _)| *p)
        .collect()
}

/// A training pair for a learned completer.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionPair {
    pub partial: Vec<Point>,
    pub complete: Vec<Point>,
    /// FPS skeleton of `complete`.
    pub structure: Vec<Point>,
    /// Yaw of the last augmentation, radians.
    pub rotation: f64,
    /// Linear part of the last augmentation (applied after the yaw).
    pub linear: Matrix3<f64>,
}

/// Builds a pair: hidden-point-removal partial view plus FPS structure.
pub fn make_pair(
    complete: &[Point],
    viewpoint: &Point,
    removal_fraction: f64,
    structure_points: usize,
    seed: u64,
) -> Result<CompletionPair> {
    let m = structure_points.min(complete.len());
    let structure = fps(complete, m, 0)?.into_iter().map(|i| complete[i]).collect();
    Ok(CompletionPair {
        partial: make_partial(complete, viewpoint, removal_fraction, seed),
        complete: complete.to_vec(),
        structure,
        rotation: 0.0,
        linear: Matrix3::identity(),
    })
}

/// Random yaw in [−π/2, π/2] followed by `I + εG`, `G` standard normal,
/// applied to every point set of the pair.
pub fn augment(pair: &CompletionPair, seed: u64, epsilon: f64) -> CompletionPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
    let g = Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let linear = Matrix3::identity() + epsilon * g;
    let t = linear * rotation_z(yaw);
    let apply = |ps: &[Point]| ps.iter().map(|p| Point::from(t * p.coords)).collect();
    CompletionPair {
        partial: apply(&pair.partial),
        complete: apply(&pair.complete),
        structure: apply(&pair.structure),
        rotation: yaw,
        linear,
    }
}

fn mean_nearest_sq(a: &[Point], b: &[Point]) -> f64 {
    use rayon::prelude::*;
    a.par_iter()
        .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance from
/// `a` to `b` plus the same from `b` to `a`, m².
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("chamfer of an empty point set".into()));
    }
    Ok(mean_nearest_sq(a, b) + mean_nearest_sq(b, a))
}

/// Point completion plug-in.
pub trait Completer: Send + Sync {
    fn name(&self) -> &str;
    /// Completed point set for a partial observation of one object.
    fn complete(&self, partial: &[Point], category: &str) -> Result<Vec<Point>>;
}

/// Reflection baseline; ignores the category.
///
/// The BEV rectangle is fitted and the support of its two long edges
/// compared. When the weaker edge has at least `balance` of the stronger
/// one's support the object is treated as seen from both sides and mirrored
/// about its center plane; otherwise the weak edge is taken as the symmetry
/// plane. The result is the input plus its reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MirrorCompleter {
    pub balance: f64,
}

impl Default for MirrorCompleter {
    fn default() -> Self {
        Self { balance: 0.3 }
    }
}

impl MirrorCompleter {
    /// Reflection plane as `(point on plane, unit normal)` in BEV.
    pub fn plane(&self, points: &[Point]) -> Result<([f64; 2], [f64; 2])> {
        let bev: Vec<[f64; 2]> = points.iter().map(|p| [p.x, p.y]).collect();
        let fit = l_shape_fit(&bev)?;
        let bx = fit.to_box(0.0, 1.0);
        let (s, c) = bx.heading.sin_cos();
        let normal = [-s, c];
        let half_w = 0.5 * bx.dims[1];
        let delta = (0.05 * bx.dims[1]).max(0.05);
        let (mut lo, mut hi) = (0usize, 0usize);
        for p in points {
            let y = bx.to_local(p).y;
            if (y + half_w).abs() <= delta {
                lo += 1;
            }
            if (y - half_w).abs() <= delta {
                hi += 1;
            }
        }
        let (weak, strong) = (lo.min(hi) as f64, lo.max(hi) as f64);
        let offset = if weak >= self.balance * strong {
            0.0
        } else if lo < hi {
            -half_w
        } else {
            half_w
        };
        let origin = [bx.center.x + normal[0] * offset, bx.center.y + normal[1] * offset];
        Ok((origin, normal))
    }
}

impl Completer for MirrorCompleter {
    fn name(&self) -> &str {
        "mirror"
    }

    fn complete(&self, partial: &[Point], _category: &str) -> Result<Vec<Point>> {
        if partial.is_empty() {
            return Err(Error::InvalidInput("completion of an empty point set".into()));
        }
        let Ok((o, nrm)) = self.plane(partial) else {
            return Ok(partial.to_vec());
        };
        let mut out = partial.to_vec();
        out.extend(partial.iter().map(|p| {
            let d = (p.x - o[0]) * nrm[0] + (p.y - o[1]) * nrm[1];
            Point::new(p.x - 2.0 * d * nrm[0], p.y - 2.0 * d * nrm[1], p.z)
        }));
        Ok(out)
    }
}

/// Completer run as an external program:
/// `PROGRAM [ARGS..] INPUT.bin CATEGORY OUTPUT.bin`, both files raw
/// little-endian float32 `x y z` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCompleter {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

pub fn encode_xyz(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 12);
    for p in points {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_xyz(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    if !bytes.len().is_multiple_of(12) {
        return Err(Error::malformed(
            path,
            format!("byte {}", bytes.len() - bytes.len() % 12),
            "truncated xyz record",
        ));
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap()) as f64;
            Point::new(f(0), f(4), f(8))
        })
        .collect())
}

impl Completer for ExternalCompleter {
    fn name(&self) -> &str {
        "external"
    }

    fn complete(&self, partial: &[Point], category: &str) -> Result<Vec<Point>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("partial.bin");
        let output = dir.path().join("complete.bin");
        std::fs::write(&input, encode_xyz(partial)).map_err(|e| Error::io(&input, e))?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(category)
            .arg(&output)
            .status()
            .map_err(|e| Error::Completer(format!("{}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Completer(format!(
                "{} exited with {status}",
                self.program.display()
            )));
        }
        let bytes = std::fs::read(&output).map_err(|e| Error::io(&output, e))?;
        decode_xyz(&output, &bytes)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::boxes::fit_box;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    /// Samples the surface of an axis-aligned box centered at the origin.
    pub(crate) fn box_surface(dims: [f64; 3], step: f64) -> Vec<Point> {
        let h = dims.map(|d| d / 2.0);
        let mut out = Vec::new();
        let n = dims.map(|d| (d / step).round() as i32);
        for i in 0..=n[0] {
            for j in 0..=n[1] {
                for k in 0..=n[2] {
                    let on = [i == 0 || i == n[0], j == 0 || j == n[1], k == 0 || k == n[2]];
                    if on.iter().any(|&b| b) {
                        out.push(Point::new(
                            -h[0] + dims[0] * i as f64 / n[0] as f64,
                            -h[1] + dims[1] * j as f64 / n[1] as f64,
                            -h[2] + dims[2] * k as f64 / n[2] as f64,
                        ));
                    }
                }
            }
        }
        out
    }

    fn unit_box() -> Box3D {
        Box3D::new(Point::new(1.0, 1.0, 1.0), [2.0, 2.0, 2.0], 0.0)
    }

    #[test]
    fn completeness_counts_cells() {
        let b = unit_box();
        // 2×2×2 lattice at resolution 1
        let full: Vec<Point> = (0..8)
            .map(|i| {
                Point::new(
                    0.5 + (i & 1) as f64,
                    0.5 + ((i >> 1) & 1) as f64,
                    0.5 + ((i >> 2) & 1) as f64,
                )
            })
            .collect();
        assert_eq!(completeness(&full, &b, 1.0, 0.6).unwrap().occupied_grid_ratio, 1.0);
        assert_eq!(completeness(&full[..4], &b, 1.0, 0.6).unwrap().occupied_grid_ratio, 0.5);
        let one = completeness(&full[..1], &b, 1.0, 0.6).unwrap();
        assert_eq!(one.occupied_grid_ratio, 0.125);
        assert_eq!(one.verdict, Verdict::Partial);
        assert!(completeness(&[], &b, 1.0, 0.6).is_err());
    }

    #[test]
    fn fps_square_picks_opposite_corner() {
        let sq = [
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(1.0, 1.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
        ];
        assert_eq!(fps(&sq, 2, 0).unwrap(), vec![0, 2]);
        let mut all = fps(&sq, 4, 0).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&sq, 5, 0).is_err());
    }

    /// Exhaustive re-derivation of each FPS step.
    pub(crate) fn fps_oracle_agrees(points: &[Point], sel: &[usize]) -> bool {
        for step in 1..sel.len() {
            let chosen = &sel[..step];
            let mut best = None;
            for i in 0..points.len() {
                if chosen.contains(&i) {
                    continue;
                }
                let d = chosen
                    .iter()
                    .map(|&j| (points[i] - points[j]).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                match best {
                    Some((_, bd)) if d <= bd => {}
                    _ => best = Some((i, d)),
                }
            }
            if best.map(|b| b.0) != Some(sel[step]) {
                return false;
            }
        }
        true
    }

    #[test]
    fn fps_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..20 {
            let pts: Vec<Point> = (0..30)
                .map(|_| {
                    Point::new(
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let sel = fps(&pts, 10, 0).unwrap();
            assert!(fps_oracle_agrees(&pts, &sel));
        }
    }

    #[test]
    fn fps_spreads_more_than_random_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let min_pair = |ps: &[Point]| {
            let mut m = f64::INFINITY;
            for i in 0..ps.len() {
                for j in i + 1..ps.len() {
                    m = m.min((ps[i] - ps[j]).norm());
                }
            }
            m
        };
        let mut wins = 0;
        for _ in 0..100 {
            let pts: Vec<Point> = (0..60)
                .map(|_| {
                    Point::new(
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let sel: Vec<Point> = fps(&pts, 8, 0).unwrap().into_iter().map(|i| pts[i]).collect();
            let mut idx: Vec<usize> = (0..60).collect();
            idx.shuffle(&mut rng);
            let rnd: Vec<Point> = idx[..8].iter().map(|&i| pts[i]).collect();
            if min_pair(&sel) >= min_pair(&rnd) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}");
    }

    fn sphere(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                Point::from(v.normalize())
            })
            .collect()
    }

    #[test]
    fn partial_view_favors_the_visible_hemisphere() {
        let pts = sphere(2000, 1);
        let part = make_partial(&pts, &Point::new(5.0, 0.0, 0.0), 0.5, 7);
        assert_eq!(part.len(), 1000);
        let front = part.iter().filter(|p| p.x > 0.0).count();
        assert!(front as f64 >= 0.8 * part.len() as f64, "{front}");
        // subset of the input, deterministic
        assert!(part.iter().all(|p| pts.contains(p)));
        assert_eq!(part, make_partial(&pts, &Point::new(5.0, 0.0, 0.0), 0.5, 7));
        assert_eq!(make_partial(&pts, &Point::new(5.0, 0.0, 0.0), 0.0, 7), pts);
    }

    #[test]
    fn augmentation_bounds_and_isometry() {
        let pts = sphere(50, 2);
        let pair = make_pair(&pts, &Point::new(3.0, 0.0, 0.0), 0.3, 16, 0).unwrap();
        assert_eq!(pair.structure.len(), 16);
        let a = augment(&pair, 42, 0.0);
        assert_eq!(a, augment(&pair, 42, 0.0));
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = (pts[i] - pts[j]).norm();
                let d1 = (a.complete[i] - a.complete[j]).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
        for seed in 0..10_000 {
            let r = augment(
                &CompletionPair {
                    partial: vec![],
                    complete: vec![],
                    structure: vec![],
                    rotation: 0.0,
                    linear: Matrix3::identity(),
                },
                seed,
                0.05,
            )
            .rotation;
            assert!((-FRAC_PI_2..=FRAC_PI_2).contains(&r));
        }
    }

    #[test]
    fn chamfer_closed_forms() {
        let x = vec![Point::new(0.0, 0.0, 0.0), Point::new(0.0, 3.0, 0.0)];
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        let d = 0.5;
        let a = [Point::new(1.0, 2.0, 3.0)];
        let b = [Point::new(1.0 + d, 2.0, 3.0)];
        assert!((chamfer(&a, &b).unwrap() - 2.0 * d * d).abs() < 1e-15);
        assert!(chamfer(&[], &b).is_err());
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_nonnegative(
            a in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..20),
            b in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..20),
        ) {
            let a: Vec<Point> = a.into_iter().map(Point::from).collect();
            let b: Vec<Point> = b.into_iter().map(Point::from).collect();
            let ab = chamfer(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, chamfer(&b, &a).unwrap());
        }

        #[test]
        fn mirror_never_shrinks_fitted_dims(
            yaw in -3.0f64..3.0, keep in 0.3f64..1.0, cx in -20.0f64..20.0, cy in -20.0f64..20.0,
        ) {
            let full = box_surface([4.4, 1.8, 1.5], 0.1);
            let half: Vec<Point> = full.iter().filter(|p| p.y <= -0.9 + 1.8 * keep + 1e-9)
                .map(|p| Point::from(rotation_z(yaw) * p.coords + Vector3::new(cx, cy, 0.0))).collect();
            let before = fit_box(&half).unwrap();
            let after = fit_box(&MirrorCompleter::default().complete(&half, "car").unwrap()).unwrap();
            for k in 0..3 {
                prop_assert!(after.dims[k] >= before.dims[k] - 1e-6, "{:?} vs {:?}", after.dims, before.dims);
            }
        }
    }

    #[test]
    fn symmetric_input_mirrors_onto_itself() {
        let full = box_surface([4.0, 2.0, 1.5], 0.25);
        let out = MirrorCompleter::default().complete(&full, "").unwrap();
        assert_eq!(out.len(), 2 * full.len());
        for p in &out[full.len()..] {
            let nearest = full.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-9);
        }
    }

    #[test]
    fn half_car_width_recovered() {
        let dims = [4.5, 1.9, 1.5];
        let full = box_surface(dims, 0.05);
        let half: Vec<Point> = full
            .iter()
            .filter(|p| p.y <= 1e-9)
            .map(|p| rotation_z(0.4) * p)
            .collect();
        let out = MirrorCompleter::default().complete(&half, "car").unwrap();
        let b = fit_box(&out).unwrap();
        assert!((b.dims[1] - dims[1]).abs() / dims[1] < 0.05, "{:?}", b.dims);
        let partial_fit = fit_box(&half).unwrap();
        assert!((partial_fit.dims[1] - dims[1]).abs() / dims[1] > 0.4);
    }

    #[test]
    fn xyz_round_trip() {
        let pts = vec![Point::new(1.5, -2.25, 3.0)];
        let p = Path::new("x.bin");
        assert_eq!(decode_xyz(p, &encode_xyz(&pts)).unwrap(), pts);
        assert!(decode_xyz(p, &[0u8; 5]).is_err());
    }
}
