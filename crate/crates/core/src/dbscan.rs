//! Density-based clustering with a uniform-grid neighbor index.

use std::collections::{HashMap, VecDeque};

use crate::geometry::Point;

pub const NOISE: i32 = -1;

/// Uniform hash grid with cell size `eps`.
struct Grid<'a> {
    points: &'a [Point],
    eps2: f64,
    inv: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Point], eps: f64) -> Self {
        let inv = 1.0 / eps;
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, inv)).or_default().push(i);
        }
        Self {
            points,
            eps2: eps * eps,
            inv,
            cells,
        }
    }

    fn key(p: &Point, inv: f64) -> [i64; 3] {
        [
            (p.x * inv).floor() as i64,
            (p.y * inv).floor() as i64,
            (p.z * inv).floor() as i64,
        ]
    }

    fn neighbors(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let p = &self.points[i];
        let k = Self::key(p, self.inv);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(c) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(
                            c.iter()
                                .copied()
                                .filter(|&j| (self.points[j] - p).norm_squared() <= self.eps2),
                        );
                    }
                }
            }
        }
    }
}

/// Cluster labels `0..k` in order of discovery, `NOISE` for noise.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps`. Clusters are grown from core points in index order, so a border
/// point reachable from two clusters joins the earlier one.
pub fn dbscan(points: &[Point], eps: f64, min_pts: usize) -> Vec<i32> {
    assert!(eps > 0.0 && min_pts >= 1, "dbscan needs eps > 0 and min_pts >= 1");
    let n = points.len();
    let grid = Grid::new(points, eps);
    let mut labels = vec![None::<i32>; n];
    let mut next = 0i32;
    let mut nb = Vec::new();
    let mut queue = VecDeque::new();
    // a point is labeled when first reached; only unvisited ones are expanded
    let claim = |labels: &mut [Option<i32>], queue: &mut VecDeque<usize>, nb: &[usize], id: i32| {
        for &j in nb {
            match labels[j] {
                None => {
                    labels[j] = Some(id);
                    queue.push_back(j);
                }
                Some(NOISE) => labels[j] = Some(id),
                Some(_) => {}
            }
        }
    };
    for i in 0..n {
        if labels[i].is_some() {
            continue;
        }
        grid.neighbors(i, &mut nb);
        if nb.len() < min_pts {
            labels[i] = Some(NOISE);
            continue;
        }
        let id = next;
        next += 1;
        labels[i] = Some(id);
        claim(&mut labels, &mut queue, &nb, id);
        while let Some(j) = queue.pop_front() {
            grid.neighbors(j, &mut nb);
            if nb.len() >= min_pts {
                claim(&mut labels, &mut queue, &nb, id);
            }
        }
    }
    labels.into_iter().map(|l| l.unwrap_or(NOISE)).collect()
}

/// Index of the largest cluster; ties go to the smaller label.
pub fn largest_cluster(labels: &[i32]) -> Option<i32> {
    let mut counts: HashMap<i32, usize> = HashMap::new();
    for &l in labels.iter().filter(|&&l| l != NOISE) {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
}
