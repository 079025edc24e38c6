//! Small rigid-geometry helpers shared by the modules.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use std::f64::consts::{PI, TAU};

pub type Point = Point3<f64>;

/// Applies a 4×4 rigid transform to a point.
pub fn transform_point(t: &Matrix4<f64>, p: &Point) -> Point {
    let r = t.fixed_view::<3, 3>(0, 0);
    let tr = t.fixed_view::<3, 1>(0, 3);
    Point::from(r * p.coords + tr)
}

/// Inverse of a rigid transform (rotation block assumed orthonormal).
pub fn rigid_inverse(t: &Matrix4<f64>) -> Matrix4<f64> {
    let r: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into_owned();
    let tr: Vector3<f64> = t.fixed_view::<3, 1>(0, 3).into_owned();
    let rt = r.transpose();
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(rt * tr)));
    out
}

pub fn rotation_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rigid transform with a yaw rotation and a translation.
pub fn yaw_transform(yaw: f64, translation: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation_z(yaw));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
    m
}

/// Yaw of the rotation block of a transform (rotation about +z).
pub fn yaw_of(t: &Matrix4<f64>) -> f64 {
    t[(1, 0)].atan2(t[(0, 0)])
}

/// Wraps an angle into [-π, π).
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w -= TAU;
    }
    w
}

pub fn centroid(points: &[Point]) -> Option<Point> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Some(Point::from(sum / points.len() as f64))
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Max absolute entry of RᵀR − I.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}
