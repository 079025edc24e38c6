//! On-disk scene bundle layout.
//!
//! ```text
//! calib.json              per-view extrinsics/intrinsics
//! poses.jsonl             one {frame_index, timestamp, transform[16]} per line
//! frames/NNNNNN.bin       x, y, z, intensity as little-endian f32 per point
//! masks/VIEW/NNNNNN.idx   u16 index map, height×width, 0 = no mask
//! masks/VIEW/NNNNNN.json  k -> {instance_id, category, box2d, confidence, appearance}
//! vocab.txt               one category per line
//! ```
//!
//! An `.idx` file may hold several stacked height×width layers. Layer 0 is the
//! usual visible partition; extra layers carry pixels shared by overlapping
//! masks (for example amodal stuff regions hidden behind objects).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scene::{validate_bundle, CameraCalibration, EgoPose, MaskTrack2D, PointCloudFrame, SceneBundle};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibFile {
    views: Vec<CalibRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibRecord {
    view_id: String,
    rotation: [f64; 9],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    panoramic_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    frame_index: u32,
    timestamp: f64,
    transform: [f64; 16],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRecord {
    instance_id: Option<u32>,
    category: String,
    box2d: [f64; 4],
    confidence: f64,
    appearance: Vec<f32>,
}

pub fn frame_file_name(frame_index: u32, ext: &str) -> String {
    format!("{frame_index:06}.{ext}")
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_frame_stem(path: &Path) -> Option<u32> {
    path.file_stem()?.to_str()?.parse().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// Reads `x, y, z` (and optionally a fourth scalar) f32 records.
pub fn decode_f32_records(path: &Path, bytes: &[u8], stride: usize) -> Result<Vec<Vec<f32>>> {
    let rec = stride * 4;
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::malformed(
            path,
            bytes.len() / rec,
            format!("file size {} is not a multiple of {rec}", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(rec)
        .map(|c| {
            c.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect())
}

pub fn encode_frame(frame: &PointCloudFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.points.len() * 16);
    for (i, p) in frame.points.iter().enumerate() {
        let intensity = frame.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Loads and validates a scene bundle directory.
pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let bundle = read_bundle_unchecked(dir)?;
    let diags = validate_bundle(&bundle);
    if diags.is_empty() {
        Ok(bundle)
    } else {
        Err(Error::Invariant(diags))
    }
}

/// Parses a bundle without running the invariant checks.
pub fn read_bundle_unchecked(dir: &Path) -> Result<SceneBundle> {
    let calib_path = dir.join("calib.json");
    let calib: CalibFile =
        serde_json::from_str(&read_to_string(&calib_path)?).map_err(|e| Error::malformed(&calib_path, "views", e))?;
    let calibrations: Vec<CameraCalibration> = calib
        .views
        .into_iter()
        .map(|c| CameraCalibration {
            view_id: c.view_id,
            rotation: Matrix3::from_row_slice(&c.rotation),
            translation: Vector3::from_row_slice(&c.translation),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            panoramic_index: c.panoramic_index,
        })
        .collect();

    let vocab_path = dir.join("vocab.txt");
    let vocabulary = read_to_string(&vocab_path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();

    let poses_path = dir.join("poses.jsonl");
    let mut poses = Vec::new();
    let mut timestamps = BTreeMap::new();
    for (line_no, line) in read_to_string(&poses_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(line)
            .map_err(|e| Error::malformed(&poses_path, format!("line {}", line_no + 1), e))?;
        timestamps.insert(rec.frame_index, rec.timestamp);
        poses.push(EgoPose {
            frame_index: rec.frame_index,
            transform: Matrix4::from_row_slice(&rec.transform),
        });
    }

    let frames_dir = dir.join("frames");
    let mut frames = Vec::new();
    if frames_dir.is_dir() {
        for path in sorted_entries(&frames_dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some("bin") {
                continue;
            }
            let frame_index =
                parse_frame_stem(&path).ok_or_else(|| Error::malformed(&path, "name", "expected NNNNNN.bin"))?;
            let timestamp = *timestamps.get(&frame_index).ok_or_else(|| {
                Error::malformed(&poses_path, format!("frame {frame_index}"), "no pose/timestamp record")
            })?;
            let recs = decode_f32_records(&path, &read_bytes(&path)?, 4)?;
            frames.push(PointCloudFrame {
                frame_index,
                timestamp,
                points: recs
                    .iter()
                    .map(|r| Point::new(r[0] as f64, r[1] as f64, r[2] as f64))
                    .collect(),
                intensity: Some(recs.iter().map(|r| r[3]).collect()),
            });
        }
    }
    if frames.is_empty() {
        return Err(Error::NoFrames(frames_dir));
    }
    frames.sort_by_key(|f| f.frame_index);

    let mut mask_tracks = Vec::new();
    let masks_dir = dir.join("masks");
    if masks_dir.is_dir() {
        for view_dir in sorted_entries(&masks_dir)? {
            if !view_dir.is_dir() {
                continue;
            }
            let view_id = view_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            let calib = calibrations
                .iter()
                .find(|c| c.view_id == view_id)
                .ok_or_else(|| Error::malformed(&view_dir, &view_id, "no calibration for this view"))?;
            for idx_path in sorted_entries(&view_dir)? {
                if idx_path.extension().and_then(|e| e.to_str()) != Some("idx") {
                    continue;
                }
                mask_tracks.extend(read_mask_image(&idx_path, &view_id, calib)?);
            }
        }
    }

    Ok(SceneBundle {
        frames,
        calibrations,
        poses,
        mask_tracks,
        vocabulary,
    })
}

fn read_mask_image(idx_path: &Path, view_id: &str, calib: &CameraCalibration) -> Result<Vec<MaskTrack2D>> {
    let frame_index =
        parse_frame_stem(idx_path).ok_or_else(|| Error::malformed(idx_path, "name", "expected NNNNNN.idx"))?;
    let side_path = idx_path.with_extension("json");
    let sidecar: BTreeMap<u16, MaskRecord> =
        serde_json::from_str(&read_to_string(&side_path)?).map_err(|e| Error::malformed(&side_path, "sidecar", e))?;

    let bytes = read_bytes(idx_path)?;
    let plane = calib.width as usize * calib.height as usize * 2;
    if plane == 0 || bytes.is_empty() || bytes.len() % plane != 0 {
        return Err(Error::malformed(
            idx_path,
            "index map",
            format!(
                "size {} is not a positive multiple of {}x{}x2",
                bytes.len(),
                calib.width,
                calib.height
            ),
        ));
    }
    let mut pixels: BTreeMap<u16, Vec<[u32; 2]>> = BTreeMap::new();
    for layer in bytes.chunks_exact(plane) {
        for (i, b) in layer.chunks_exact(2).enumerate() {
            let k = u16::from_le_bytes([b[0], b[1]]);
            if k == 0 {
                continue;
            }
            let u = (i % calib.width as usize) as u32;
            let v = (i / calib.width as usize) as u32;
            pixels.entry(k).or_default().push([u, v]);
        }
    }
    if let Some(k) = pixels.keys().find(|k| !sidecar.contains_key(k)) {
        return Err(Error::malformed(
            &side_path,
            format!("k={k}"),
            "index map value has no sidecar record",
        ));
    }

    Ok(sidecar
        .into_iter()
        .map(|(k, rec)| {
            let mut px = pixels.remove(&k).unwrap_or_default();
            px.sort_by_key(|p| (p[1], p[0]));
            px.dedup();
            let mut appearance: Vec<f64> = rec.appearance.iter().map(|&v| v as f64).collect();
            let norm = appearance.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                appearance.iter_mut().for_each(|v| *v /= norm);
            }
            MaskTrack2D {
                view_id: view_id.to_string(),
                frame_index,
                mask_index: k,
                instance_id: rec.instance_id,
                category: rec.category,
                pixels: px,
                box2d: rec.box2d,
                appearance,
                confidence: rec.confidence,
            }
        })
        .collect())
}

/// Encodes the masks of one image into stacked u16 layers.
pub fn encode_index_map(masks: &[&MaskTrack2D], width: u32, height: u32) -> Vec<u8> {
    let plane = width as usize * height as usize;
    let mut layers: Vec<Vec<u16>> = Vec::new();
    let mut sorted: Vec<&&MaskTrack2D> = masks.iter().collect();
    sorted.sort_by_key(|m| m.mask_index);
    for m in sorted {
        for p in &m.pixels {
            let i = p[1] as usize * width as usize + p[0] as usize;
            match layers.iter_mut().find(|l| l[i] == 0) {
                Some(l) => l[i] = m.mask_index,
                None => {
                    let mut l = vec![0u16; plane];
                    l[i] = m.mask_index;
                    layers.push(l);
                }
            }
        }
    }
    if layers.is_empty() {
        layers.push(vec![0u16; plane]);
    }
    let mut out = Vec::with_capacity(layers.len() * plane * 2);
    for l in &layers {
        for v in l {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes a bundle in the layout read by [`load_bundle`].
pub fn save_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    let calib = CalibFile {
        views: bundle
            .calibrations
            .iter()
            .map(|c| {
                let mut rotation = [0.0; 9];
                for r in 0..3 {
                    for col in 0..3 {
                        rotation[r * 3 + col] = c.rotation[(r, col)];
                    }
                }
                CalibRecord {
                    view_id: c.view_id.clone(),
                    rotation,
                    translation: [c.translation.x, c.translation.y, c.translation.z],
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    width: c.width,
                    height: c.height,
                    panoramic_index: c.panoramic_index,
                }
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&calib).expect("calibration serializes");
    write_file(&dir.join("calib.json"), json.as_bytes())?;

    let mut vocab = bundle.vocabulary.join("\n");
    vocab.push('\n');
    write_file(&dir.join("vocab.txt"), vocab.as_bytes())?;

    let mut poses = String::new();
    for p in &bundle.poses {
        let timestamp = bundle.frame(p.frame_index).map_or(0.0, |f| f.timestamp);
        let mut transform = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                transform[r * 4 + c] = p.transform[(r, c)];
            }
        }
        let rec = PoseRecord {
            frame_index: p.frame_index,
            timestamp,
            transform,
        };
        poses.push_str(&serde_json::to_string(&rec).expect("pose serializes"));
        poses.push('\n');
    }
    write_file(&dir.join("poses.jsonl"), poses.as_bytes())?;

    fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir.join("frames"), e))?;
    for f in &bundle.frames {
        write_file(
            &dir.join("frames").join(frame_file_name(f.frame_index, "bin")),
            &encode_frame(f),
        )?;
    }

    let mut per_image: BTreeMap<(&str, u32), Vec<&MaskTrack2D>> = BTreeMap::new();
    for m in &bundle.mask_tracks {
        per_image
            .entry((m.view_id.as_str(), m.frame_index))
            .or_default()
            .push(m);
    }
    for ((view, frame), masks) in per_image {
        let calib = bundle
            .calibration(view)
            .ok_or_else(|| Error::InvalidInput(format!("mask view `{view}` has no calibration")))?;
        let base = dir.join("masks").join(view);
        write_file(
            &base.join(frame_file_name(frame, "idx")),
            &encode_index_map(&masks, calib.width, calib.height),
        )?;
        let side: BTreeMap<u16, MaskRecord> = masks
            .iter()
            .map(|m| {
                (
                    m.mask_index,
                    MaskRecord {
                        instance_id: m.instance_id,
                        category: m.category.clone(),
                        box2d: m.box2d,
                        confidence: m.confidence,
                        appearance: m.appearance.iter().map(|&v| v as f32).collect(),
                    },
                )
            })
            .collect();
        let json = serde_json::to_string(&side).expect("sidecar serializes");
        write_file(&base.join(frame_file_name(frame, "json")), json.as_bytes())?;
    }
    Ok(())
}
