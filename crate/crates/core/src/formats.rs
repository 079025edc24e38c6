//! Box table: one tab-separated record per (frame, instance).

use std::path::Path;

use crate::boxes::{Box3D, MotionState};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::Point;

pub const BOX_HEADER: &str =
    "frame_index\tinstance_id\tcategory\tcx\tcy\tcz\tlength\twidth\theight\theading\tmotion_state\tconfidence";

#[derive(Debug, Clone, PartialEq)]
pub struct BoxRecord {
    pub frame_index: u32,
    pub instance_id: u32,
    pub category: String,
    /// LiDAR frame of `frame_index`.
    pub bbox: Box3D,
    pub motion: MotionState,
    pub confidence: f64,
}

impl BoxRecord {
    pub fn to_detection(&self) -> Detection {
        Detection {
            frame_index: self.frame_index,
            instance_id: self.instance_id,
            category: self.category.clone(),
            bbox: self.bbox,
            confidence: self.confidence,
        }
    }
}

/// Records sorted by (frame, instance); floats in shortest round-trip form.
pub fn write_boxes(records: &[BoxRecord]) -> String {
    let mut sorted: Vec<&BoxRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.frame_index, r.instance_id));
    let mut s = String::from(BOX_HEADER);
    s.push('\n');
    for r in sorted {
        let b = &r.bbox;
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.frame_index,
            r.instance_id,
            r.category,
            b.center.x,
            b.center.y,
            b.center.z,
            b.dims[0],
            b.dims[1],
            b.dims[2],
            b.heading,
            r.motion.as_str(),
            r.confidence
        ));
    }
    s
}

pub fn read_boxes(path: &Path, text: &str) -> Result<Vec<BoxRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == BOX_HEADER => {}
        _ => return Err(Error::malformed(path, "line 1", "missing box table header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec = format!("line {}", i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 12 {
            return Err(Error::malformed(
                path,
                &rec,
                format!("expected 12 fields, got {}", f.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            let v: f64 = f[k]
                .parse()
                .map_err(|_| Error::malformed(path, &rec, format!("field {} is not a number: `{}`", k + 1, f[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::malformed(path, &rec, format!("field {} is not finite", k + 1)))
            }
        };
        let int = |k: usize| -> Result<u32> {
            f[k].parse()
                .map_err(|_| Error::malformed(path, &rec, format!("field {} is not an integer: `{}`", k + 1, f[k])))
        };
        let motion = match f[10] {
            "static" => MotionState::Static,
            "dynamic" => MotionState::Dynamic,
            other => return Err(Error::malformed(path, &rec, format!("unknown motion state `{other}`"))),
        };
        let dims = [num(6)?, num(7)?, num(8)?];
        if dims.iter().any(|d| *d <= 0.0) {
            return Err(Error::malformed(path, &rec, "box dimensions must be positive"));
        }
        out.push(BoxRecord {
            frame_index: int(0)?,
            instance_id: int(1)?,
            category: f[2].to_string(),
            bbox: Box3D::new(Point::new(num(3)?, num(4)?, num(5)?), dims, num(9)?),
            motion,
            confidence: num(11)?,
        });
    }
    Ok(out)
}
