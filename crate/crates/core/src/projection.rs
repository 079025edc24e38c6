//! LiDAR → camera → image projection with frustum culling.

use nalgebra::Vector3;

use crate::geometry::Point;
use crate::scene::{CameraCalibration, PointCloudFrame};

/// A LiDAR point that lands inside an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub point_index: usize,
    pub pixel: [f64; 2],
    /// Camera-frame z, meters.
    pub depth: f64,
}

impl ProjectedPoint {
    /// Integer pixel cell (floor rasterization).
    pub fn cell(&self) -> [u32; 2] {
        [self.pixel[0].floor() as u32, self.pixel[1].floor() as u32]
    }
}

/// `R·p + t`.
pub fn to_camera(point: &Point, calib: &CameraCalibration) -> Point {
    Point::from(calib.rotation * point.coords + calib.translation)
}

/// Pinhole projection; `None` when behind the camera or outside `[0,w)×[0,h)`.
pub fn to_pixel(cam: &Point, calib: &CameraCalibration) -> Option<[f64; 2]> {
    if !(cam.z > 0.0) {
        return None;
    }
    let u = calib.fx * cam.x / cam.z + calib.cx;
    let v = calib.fy * cam.y / cam.z + calib.cy;
    if u >= 0.0 && u < calib.width as f64 && v >= 0.0 && v < calib.height as f64 {
        Some([u, v])
    } else {
        None
    }
}

/// Camera-frame point from a pixel and its depth.
pub fn unproject(pixel: [f64; 2], depth: f64, calib: &CameraCalibration) -> Point {
    Point::new(
        (pixel[0] - calib.cx) * depth / calib.fx,
        (pixel[1] - calib.cy) * depth / calib.fy,
        depth,
    )
}

pub fn project_point(index: usize, point: &Point, calib: &CameraCalibration) -> Option<ProjectedPoint> {
    let cam = to_camera(point, calib);
    to_pixel(&cam, calib).map(|pixel| ProjectedPoint {
        point_index: index,
        pixel,
        depth: cam.z,
    })
}

/// Every in-view point of the frame, in input order.
pub fn project_frame(frame: &PointCloudFrame, calib: &CameraCalibration) -> Vec<ProjectedPoint> {
    project_points(&frame.points, calib)
}

pub fn project_points(points: &[Point], calib: &CameraCalibration) -> Vec<ProjectedPoint> {
    points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project_point(i, p, calib))
        .collect()
}

/// Camera optical center expressed in the LiDAR frame.
pub fn camera_center(calib: &CameraCalibration) -> Point {
    Point::from(-(calib.rotation.transpose() * calib.translation))
}

/// Ray direction in the LiDAR frame through the given pixel position.
pub fn pixel_ray(pixel: [f64; 2], calib: &CameraCalibration) -> Vector3<f64> {
    let d = Vector3::new((pixel[0] - calib.cx) / calib.fx, (pixel[1] - calib.cy) / calib.fy, 1.0);
    (calib.rotation.transpose() * d).normalize()
}
