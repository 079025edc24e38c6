//! Incremental 3D convex hull, used for hidden-point removal.

use std::collections::HashSet;

use crate::geometry::Point;

/// Indices of the points that are vertices of the convex hull, ascending.
///
/// Points within a small scale-relative tolerance of a hull face count as
/// inside. Fewer than four points, or an input without volume, yields every
/// point as a vertex (nothing is hidden in a degenerate configuration).
pub fn hull_vertices(points: &[Point]) -> Vec<usize> {
    let n = points.len();
    if n < 4 {
        return (0..n).collect();
    }
    let scale = points
        .iter()
        .map(|p| p.coords.amax())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let eps = 1e-10 * scale;

    let Some(seed) = initial_simplex(points, eps) else {
        return (0..n).collect();
    };
    let [a, b, c, d] = seed;
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let inner = Point::from((points[a].coords + points[b].coords + points[c].coords + points[d].coords) / 4.0);
    for f in [[a, b, c], [a, b, d], [a, c, d], [b, c, d]] {
        faces.push(orient(points, f, &inner));
    }

    let mut normals: Vec<_> = faces.iter().map(|f| normal(points, *f)).collect();
    let mut alive: Vec<bool> = vec![true; faces.len()];
    let in_seed: HashSet<usize> = seed.into_iter().collect();
    let mut visible = Vec::new();
    for p in 0..n {
        if in_seed.contains(&p) {
            continue;
        }
        visible.clear();
        for (fi, f) in faces.iter().enumerate() {
            if alive[fi] && (points[p] - points[f[0]]).dot(&normals[fi]) > eps * normals[fi].norm() {
                visible.push(fi);
            }
        }
        if visible.is_empty() {
            continue;
        }
        let mut edges: HashSet<(usize, usize)> = HashSet::new();
        for &fi in &visible {
            let f = faces[fi];
            for (x, y) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.insert((x, y));
            }
        }
        let horizon: Vec<(usize, usize)> = edges
            .iter()
            .copied()
            .filter(|&(x, y)| !edges.contains(&(y, x)))
            .collect();
        for &fi in &visible {
            alive[fi] = false;
        }
        for (x, y) in horizon {
            let f = [x, y, p];
            faces.push(f);
            normals.push(normal(points, f));
            alive.push(true);
        }
        if alive.len() > 64 && alive.iter().filter(|a| !**a).count() * 2 > alive.len() {
            let keep: Vec<usize> = (0..faces.len()).filter(|&i| alive[i]).collect();
            faces = keep.iter().map(|&i| faces[i]).collect();
            normals = keep.iter().map(|&i| normals[i]).collect();
            alive = vec![true; faces.len()];
        }
    }

    let mut verts: Vec<usize> = faces
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .flat_map(|(f, _)| f.iter().copied())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    verts.sort_unstable();
    verts
}

fn normal(points: &[Point], f: [usize; 3]) -> nalgebra::Vector3<f64> {
    (points[f[1]] - points[f[0]]).cross(&(points[f[2]] - points[f[0]]))
}

fn orient(points: &[Point], f: [usize; 3], inner: &Point) -> [usize; 3] {
    if (inner - points[f[0]]).dot(&normal(points, f)) > 0.0 {
        [f[0], f[2], f[1]]
    } else {
        f
    }
}

/// Four affinely independent points, chosen from extremes for stability.
fn initial_simplex(points: &[Point], eps: f64) -> Option<[usize; 4]> {
    let n = points.len();
    let a = (0..n).min_by(|&i, &j| points[i].x.total_cmp(&points[j].x).then(i.cmp(&j)))?;
    let b = (0..n).max_by(|&i, &j| {
        (points[i] - points[a])
            .norm_squared()
            .total_cmp(&(points[j] - points[a]).norm_squared())
            .then(j.cmp(&i))
    })?;
    let ab = points[b] - points[a];
    if ab.norm() <= eps {
        return None;
    }
    let c = (0..n).max_by(|&i, &j| {
        ab.cross(&(points[i] - points[a]))
            .norm_squared()
            .total_cmp(&ab.cross(&(points[j] - points[a])).norm_squared())
            .then(j.cmp(&i))
    })?;
    let nrm = ab.cross(&(points[c] - points[a]));
    if nrm.norm() <= eps * ab.norm() {
        return None;
    }
    let d = (0..n).max_by(|&i, &j| {
        (points[i] - points[a])
            .dot(&nrm)
            .abs()
            .total_cmp(&(points[j] - points[a]).dot(&nrm).abs())
            .then(j.cmp(&i))
    })?;
    if (points[d] - points[a]).dot(&nrm).abs() <= eps * nrm.norm() {
        return None;
    }
    Some([a, b, c, d])
}
