//! Stage runner: association → segmentation → completion → boxes →
//! occupancy → eval.
//!
//! Each stage writes its artifacts under `OUT/<stage>/` and a
//! `manifest.json` recording the effective stage config, its hash, the
//! digests of its inputs and of every output file. A stage is skipped when
//! its manifest still matches and none of its dependencies ran in the same
//! invocation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::association::{unify_sequence, AssociationConfig, AssociationParams, GlobalIdMap};
use crate::boxes::{collect_tracks, fit_box, interpret_track, BoxParams, FrameBox, MotionState, ObjectTrack, Timeline};
use crate::bundle_io::{frame_file_name, load_bundle};
use crate::completion::{completeness, Completer, ExternalCompleter, MirrorCompleter, Verdict};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, render_detection_report, segmentation_miou, DetectionReport, MatchSpec};
use crate::formats::{read_boxes, write_boxes, BoxRecord};
use crate::geometry::{transform_point, Point};
use crate::occupancy::{
    aggregate_scene, attach_flow, decode_grid, encode_grid, occupancy_miou, voxelize, GridSpec, MiouReport,
    OccupancyGrid,
};
use crate::projection::project_point;
use crate::scene::SceneBundle;
use crate::segmentation::{
    assign_by_projection, decode_labels, denoise_instances, encode_labels, filter_scene, DbscanParams, FrameMasks,
    LabeledPointSet, ParallaxConfig,
};
use crate::synth::{load_truth, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Assoc,
    Seg,
    Complete,
    Boxes,
    Occ,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Assoc,
        Stage::Seg,
        Stage::Complete,
        Stage::Boxes,
        Stage::Occ,
        Stage::Eval,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Assoc => "assoc",
            Stage::Seg => "seg",
            Stage::Complete => "complete",
            Stage::Boxes => "boxes",
            Stage::Occ => "occ",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Ok(match s.trim() {
            "assoc" | "association" => Stage::Assoc,
            "seg" | "segmentation" => Stage::Seg,
            "complete" | "completion" => Stage::Complete,
            "boxes" => Stage::Boxes,
            "occ" | "occupancy" => Stage::Occ,
            "eval" => Stage::Eval,
            other => {
                return Err(Error::Config(format!(
                    "unknown stage `{other}` (expected assoc, seg, complete, boxes, occ, eval)"
                )))
            }
        })
    }

    /// Comma-separated list, returned in pipeline order.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        let set: BTreeSet<Stage> = s
            .split(',')
            .filter(|x| !x.trim().is_empty())
            .map(Stage::parse)
            .collect::<Result<_>>()?;
        if set.is_empty() {
            return Err(Error::Config("empty stage list".into()));
        }
        Ok(set.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageToggles {
    pub association: bool,
    pub segmentation: bool,
    pub completion: bool,
    pub boxes: bool,
    pub occupancy: bool,
    /// Runs only when the bundle carries `truth/`.
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            association: true,
            segmentation: true,
            completion: false,
            boxes: true,
            occupancy: true,
            eval: true,
        }
    }
}

impl StageToggles {
    pub fn enabled(&self, s: Stage) -> bool {
        match s {
            Stage::Assoc => self.association,
            Stage::Seg => self.segmentation,
            Stage::Complete => self.completion,
            Stage::Boxes => self.boxes,
            Stage::Occ => self.occupancy,
            Stage::Eval => self.eval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    /// Off: every point takes its first covering thing mask, else stuff mask.
    pub parallax_filter: bool,
    pub denoise: bool,
    pub parallax: ParallaxConfig,
    pub dbscan: DbscanParams,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            parallax_filter: true,
            denoise: true,
            parallax: ParallaxConfig::default(),
            dbscan: DbscanParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CompleterChoice {
    Mirror(MirrorCompleter),
    External(ExternalCompleter),
}

impl Default for CompleterChoice {
    fn default() -> Self {
        CompleterChoice::Mirror(MirrorCompleter::default())
    }
}

impl CompleterChoice {
    pub fn build(&self) -> Box<dyn Completer> {
        match self {
            CompleterChoice::Mirror(m) => Box::new(*m),
            CompleterChoice::External(e) => Box::new(e.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionConfig {
    /// Lattice cell for the occupied-grid ratio, m.
    pub resolution: f64,
    /// Ratio at or above which an object counts as complete.
    pub threshold: f64,
    pub completer: CompleterChoice,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            resolution: 0.2,
            threshold: 0.6,
            completer: CompleterChoice::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OccupancyConfig {
    pub grid: GridSpec,
    /// Points needed to mark a voxel occupied.
    pub min_points: usize,
    pub flow: bool,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            min_points: 1,
            flow: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Recorded in every manifest; every stage is deterministic.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub stages: StageToggles,
    pub association: AssociationParams,
    pub segmentation: SegmentationConfig,
    pub completion: CompletionConfig,
    pub boxes: BoxParams,
    pub occupancy: OccupancyConfig,
    pub eval: MatchSpec,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.association;
        if !(0.0..=1.0).contains(&a.appearance_weight) || !(a.location_scale_fraction > 0.0) {
            return Err(Error::Config(
                "association: appearance_weight must be in [0, 1] and location_scale_fraction positive".into(),
            ));
        }
        self.segmentation.parallax.validate()?;
        let d = &self.segmentation.dbscan;
        if !(d.eps > 0.0) || d.min_pts == 0 {
            return Err(Error::Config("dbscan: eps and min_pts must be positive".into()));
        }
        let c = &self.completion;
        if !(c.resolution > 0.0) || !(0.0..=1.0).contains(&c.threshold) {
            return Err(Error::Config(
                "completion: resolution must be positive and threshold in [0, 1]".into(),
            ));
        }
        if self.boxes.n_fit < 3 {
            return Err(Error::Config("boxes: n_fit must be at least 3".into()));
        }
        self.occupancy
            .grid
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.eval.validate()
    }

    fn stage_config(&self, s: Stage) -> Value {
        let v = |x: &dyn erased::Ser| x.to_value();
        let section = match s {
            Stage::Assoc => v(&self.association),
            Stage::Seg => v(&self.segmentation),
            Stage::Complete => v(&self.completion),
            Stage::Boxes => json!({ "boxes": v(&self.boxes), "completion": self.stages.completion }),
            Stage::Occ => v(&self.occupancy),
            Stage::Eval => v(&self.eval),
        };
        json!({ "seed": self.seed, "stage": section })
    }

    /// Stages whose outputs `s` reads.
    pub fn dependencies(&self, s: Stage) -> Vec<Stage> {
        match s {
            Stage::Assoc => vec![],
            Stage::Seg => vec![Stage::Assoc],
            Stage::Complete => vec![Stage::Seg],
            Stage::Boxes if self.stages.completion => vec![Stage::Seg, Stage::Complete],
            Stage::Boxes => vec![Stage::Seg],
            Stage::Occ => vec![Stage::Seg, Stage::Boxes],
            Stage::Eval if self.stages.occupancy => vec![Stage::Seg, Stage::Boxes, Stage::Occ],
            Stage::Eval => vec![Stage::Seg, Stage::Boxes],
        }
    }
}

mod erased {
    pub trait Ser {
        fn to_value(&self) -> serde_json::Value;
    }
    impl<T: serde::Serialize> Ser for T {
        fn to_value(&self) -> serde_json::Value {
            serde_json::to_value(self).expect("config serializes")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub input_hash: String,
    /// `bundle`, `truth` and dependency stages → digest.
    pub inputs: BTreeMap<String, String>,
    /// Effective stage config, defaults included.
    pub config: Value,
    /// Path relative to the stage directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub stats: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

impl Manifest {
    /// Digest of the output set, what dependents record as their input.
    pub fn output_digest(&self) -> String {
        sha256_hex(serde_json::to_string(&self.outputs).expect("map serializes").as_bytes())
    }
}

pub const MANIFEST: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Every file below `dir` as sorted relative paths with '/' separators,
/// skipping top-level entries named in `skip`.
fn list_files(dir: &Path, skip: &[&str]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            let rel = p.strip_prefix(dir).expect("below dir");
            if d == dir && skip.iter().any(|s| rel == Path::new(s)) {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push((key, p));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Content digest of a directory tree.
pub fn digest_dir(dir: &Path, skip: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    for (rel, p) in list_files(dir, skip)? {
        let bytes = read_file(&p)?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Reads a stage manifest and checks that every listed output is present
/// and unchanged.
pub fn verified_manifest(out: &Path, s: Stage) -> Result<Manifest> {
    let dir = out.join(s.name());
    let path = dir.join(MANIFEST);
    let m: Manifest = serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::malformed(&path, "manifest", e))?;
    for (rel, digest) in &m.outputs {
        let p = dir.join(rel);
        let bytes = read_file(&p)?;
        if sha256_hex(&bytes) != *digest {
            return Err(Error::malformed(&p, "file", "contents differ from the stage manifest"));
        }
    }
    Ok(m)
}

/// What a stage produced.
#[derive(Debug, Default)]
struct StageOutput {
    files: Vec<(String, Vec<u8>)>,
    stats: BTreeMap<String, Value>,
    notice: Option<String>,
}

impl StageOutput {
    fn stat(&mut self, k: &str, v: impl Into<Value>) {
        self.stats.insert(k.to_string(), v.into());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub bundle: PathBuf,
    pub out: PathBuf,
    /// Explicit stage selection; `None` runs every enabled stage.
    pub stages: Option<Vec<Stage>>,
}

/// Runs the pipeline; returns the status of each stage considered.
pub fn run(config: &PipelineConfig, opts: &RunOptions) -> Result<Vec<(Stage, StageStatus)>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_stages(config, opts))
}

fn run_stages(config: &PipelineConfig, opts: &RunOptions) -> Result<Vec<(Stage, StageStatus)>> {
    let bundle = load_bundle(&opts.bundle)?;
    let bundle_digest = digest_dir(&opts.bundle, &["truth"])?;
    let truth_dir = opts.bundle.join("truth");
    let has_truth = truth_dir.join("boxes.tsv").is_file();
    let selected: Vec<Stage> = match &opts.stages {
        Some(list) => {
            if let Some(s) = list
                .iter()
                .find(|s| **s == Stage::Complete && !config.stages.completion)
            {
                return Err(Error::Config(format!(
                    "stage `{}` requested but completion is disabled in the config",
                    s.name()
                )));
            }
            list.clone()
        }
        None => Stage::ALL.into_iter().filter(|s| config.stages.enabled(*s)).collect(),
    };
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    write_file(&opts.out.join("config.toml"), config.to_toml().as_bytes())?;

    let mut ran: BTreeSet<Stage> = BTreeSet::new();
    let mut statuses = Vec::new();
    for s in Stage::ALL.into_iter().filter(|s| selected.contains(s)) {
        let deps = config.dependencies(s);
        let mut inputs = BTreeMap::new();
        inputs.insert("bundle".to_string(), bundle_digest.clone());
        for d in &deps {
            let m = verified_manifest(&opts.out, *d).map_err(|_| Error::MissingDependency {
                stage: s.name().into(),
                needs: d.name().into(),
            })?;
            inputs.insert(d.name().to_string(), m.output_digest());
        }
        if s == Stage::Eval && has_truth {
            inputs.insert("truth".to_string(), digest_dir(&truth_dir, &[])?);
        }
        let config_value = config.stage_config(s);
        let config_hash = sha256_hex(config_value.to_string().as_bytes());
        let input_hash = sha256_hex(serde_json::to_string(&inputs).expect("map serializes").as_bytes());

        let cached = !deps.iter().any(|d| ran.contains(d))
            && verified_manifest(&opts.out, s)
                .is_ok_and(|m| m.config_hash == config_hash && m.input_hash == input_hash);
        if cached {
            log::info!("{}: up to date", s.name());
            statuses.push((s, StageStatus::Cached));
            continue;
        }
        log::info!("{}: running", s.name());
        let started = std::time::Instant::now();
        let output = execute(s, config, &bundle, &opts.out, has_truth.then_some(truth_dir.as_path())).map_err(|e| {
            Error::Stage {
                stage: s.name().into(),
                source: Box::new(e),
            }
        })?;
        let dir = opts.out.join(s.name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut outputs = BTreeMap::new();
        for (rel, bytes) in &output.files {
            write_file(&dir.join(rel), bytes)?;
            outputs.insert(rel.clone(), sha256_hex(bytes));
        }
        let manifest = Manifest {
            stage: s.name().into(),
            config_hash,
            input_hash,
            inputs,
            config: config_value,
            outputs,
            stats: output.stats,
            notice: output.notice,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_file(&dir.join(MANIFEST), text.as_bytes())?;
        log::info!("{}: done in {:.2?}", s.name(), started.elapsed());
        ran.insert(s);
        statuses.push((s, StageStatus::Ran));
    }
    Ok(statuses)
}

fn execute(
    s: Stage,
    config: &PipelineConfig,
    bundle: &SceneBundle,
    out: &Path,
    truth: Option<&Path>,
) -> Result<StageOutput> {
    match s {
        Stage::Assoc => stage_assoc(config, bundle),
        Stage::Seg => stage_seg(config, bundle, out),
        Stage::Complete => stage_complete(config, bundle, out),
        Stage::Boxes => stage_boxes(config, bundle, out),
        Stage::Occ => stage_occ(config, bundle, out),
        Stage::Eval => match truth {
            Some(t) => stage_eval(config, bundle, out, t),
            None => Ok(StageOutput {
                notice: Some("no ground truth in the bundle (truth/boxes.tsv missing); evaluation skipped".into()),
                ..StageOutput::default()
            }),
        },
    }
}

const GLOBAL_IDS: &str = "global_ids.json";
const COMPLETENESS: &str = "completeness.json";
const BOXES: &str = "boxes.tsv";

fn stage_assoc(config: &PipelineConfig, bundle: &SceneBundle) -> Result<StageOutput> {
    let cfg = AssociationConfig::new(&config.association, &bundle.calibrations)?;
    let ids = unify_sequence(bundle, &cfg)?;
    let mut o = StageOutput::default();
    let globals: BTreeSet<u32> = ids.bindings.iter().map(|b| b.global_id).collect();
    o.stat("tracks", ids.bindings.len());
    o.stat("global_ids", globals.len());
    o.files.push((GLOBAL_IDS.into(), (ids.to_json() + "\n").into_bytes()));
    Ok(o)
}

fn stage_seg(config: &PipelineConfig, bundle: &SceneBundle, out: &Path) -> Result<StageOutput> {
    let path = out.join(Stage::Assoc.name()).join(GLOBAL_IDS);
    let text = String::from_utf8(read_file(&path)?).map_err(|_| Error::malformed(&path, "file", "not UTF-8"))?;
    let ids = GlobalIdMap::from_json(&text)?;
    let by_frame = bundle.masks_by_frame();
    let seg = &config.segmentation;
    let results: Vec<(LabeledPointSet, usize)> = bundle
        .frames
        .par_iter()
        .map(|frame| {
            let masks = by_frame.get(&frame.frame_index).cloned().unwrap_or_default();
            let fm = FrameMasks::new(masks, &bundle.calibrations, &bundle.vocabulary, &ids)?;
            let raw = assign_by_projection(frame, &bundle.calibrations, &fm);
            let labeled = if seg.parallax_filter {
                filter_scene(&raw, &fm, &seg.parallax)
            } else {
                raw.first_claim(&fm)
            };
            Ok(if seg.denoise {
                let (l, dropped) = denoise_instances(&labeled, &frame.points, &seg.dbscan);
                (l, dropped.len())
            } else {
                (labeled, 0)
            })
        })
        .collect::<Result<_>>()?;
    let mut o = StageOutput::default();
    let mut instances = BTreeSet::new();
    let (mut points, mut labeled, mut dropped) = (0usize, 0usize, 0usize);
    for (set, d) in &results {
        points += set.labels.len();
        labeled += set.labeled_count();
        dropped += d;
        instances.extend(set.instances().into_keys());
        o.files.push((
            format!("labels/{}", frame_file_name(set.frame_index, "lbl")),
            encode_labels(&set.to_records()),
        ));
    }
    o.stat("frames", results.len());
    o.stat("points", points);
    o.stat("points_labeled", labeled);
    o.stat("instances", instances.len());
    o.stat("instances_dropped_by_denoising", dropped);
    Ok(o)
}

/// Label sets of a finished segmentation stage, one per bundle frame.
pub fn load_labels(out: &Path, bundle: &SceneBundle) -> Result<Vec<LabeledPointSet>> {
    let dir = out.join(Stage::Seg.name()).join("labels");
    bundle
        .frames
        .iter()
        .map(|f| {
            let p = dir.join(frame_file_name(f.frame_index, "lbl"));
            let recs = decode_labels(&p, &read_file(&p)?)?;
            LabeledPointSet::from_records(f.frame_index, f.points.len(), &recs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessEntry {
    pub instance_id: u32,
    pub category: String,
    /// Frame with the most points, where the ratio is measured.
    pub frame_index: u32,
    pub points: usize,
    /// `None` when the points cannot support a box.
    pub occupied_grid_ratio: Option<f64>,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessFile {
    pub completer: String,
    pub entries: Vec<CompletenessEntry>,
}

fn stage_complete(config: &PipelineConfig, bundle: &SceneBundle, out: &Path) -> Result<StageOutput> {
    let labels = load_labels(out, bundle)?;
    let frames: Vec<(u32, &[Point])> = bundle
        .frames
        .iter()
        .map(|f| (f.frame_index, f.points.as_slice()))
        .collect();
    let tracks = collect_tracks(&frames, &labels, &bundle.vocabulary);
    let c = &config.completion;
    let entries: Vec<CompletenessEntry> = tracks
        .par_iter()
        .map(|t| {
            let (frame_index, pts) = t
                .observations
                .iter()
                .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
                .map(|(f, p)| (*f, p.as_slice()))
                .unwrap_or((0, &[]));
            let report = fit_box(pts)
                .ok()
                .and_then(|b| completeness(pts, &b, c.resolution, c.threshold).ok());
            CompletenessEntry {
                instance_id: t.instance_id,
                category: t.category.clone(),
                frame_index,
                points: pts.len(),
                occupied_grid_ratio: report.map(|r| r.occupied_grid_ratio),
                verdict: report.map(|r| r.verdict),
            }
        })
        .collect();
    let mut o = StageOutput::default();
    let partial = entries.iter().filter(|e| e.verdict == Some(Verdict::Partial)).count();
    o.stat("instances", entries.len());
    o.stat("partial", partial);
    let file = CompletenessFile {
        completer: c.completer.build().name().to_string(),
        entries,
    };
    o.files.push((
        COMPLETENESS.into(),
        (serde_json::to_string_pretty(&file).expect("serializes") + "\n").into_bytes(),
    ));
    Ok(o)
}

fn stage_boxes(config: &PipelineConfig, bundle: &SceneBundle, out: &Path) -> Result<StageOutput> {
    let labels = load_labels(out, bundle)?;
    let timeline = Timeline::from_bundle(bundle)?;
    let frames: Vec<(u32, &[Point])> = bundle
        .frames
        .iter()
        .map(|f| (f.frame_index, f.points.as_slice()))
        .collect();
    let tracks = collect_tracks(&frames, &labels, &bundle.vocabulary);
    let partial: BTreeSet<u32> = if config.stages.completion {
        let p = out.join(Stage::Complete.name()).join(COMPLETENESS);
        let f: CompletenessFile =
            serde_json::from_slice(&read_file(&p)?).map_err(|e| Error::malformed(&p, "file", e))?;
        f.entries
            .iter()
            .filter(|e| e.verdict == Some(Verdict::Partial))
            .map(|e| e.instance_id)
            .collect()
    } else {
        BTreeSet::new()
    };
    let completer = config.completion.completer.build();
    let results: Vec<Result<Option<ObjectTrack>>> = tracks
        .par_iter()
        .map(|t| {
            let c = partial.contains(&t.instance_id).then_some(completer.as_ref());
            match interpret_track(t, &timeline, c, &config.boxes) {
                Ok(ot) => Ok(Some(ot)),
                Err(Error::Degenerate(m)) => {
                    log::warn!("instance {}: no box ({m})", t.instance_id);
                    Ok(None)
                }
                Err(e) => Err(Error::InvalidInput(format!("instance {}: {e}", t.instance_id))),
            }
        })
        .collect();
    let mut records = Vec::new();
    let (mut n_static, mut n_dynamic, mut skipped) = (0usize, 0usize, 0usize);
    for r in results {
        let Some(t) = r? else {
            skipped += 1;
            continue;
        };
        match t.motion {
            MotionState::Static => n_static += 1,
            MotionState::Dynamic => n_dynamic += 1,
        }
        records.extend(t.boxes.iter().map(|b| BoxRecord {
            frame_index: b.frame_index,
            instance_id: t.instance_id,
            category: t.category.clone(),
            bbox: b.bbox,
            motion: t.motion,
            confidence: if b.interpolated { 0.5 } else { 1.0 },
        }));
    }
    let mut o = StageOutput::default();
    o.stat("tracks", n_static + n_dynamic);
    o.stat("static", n_static);
    o.stat("dynamic", n_dynamic);
    o.stat("skipped", skipped);
    o.stat("boxes", records.len());
    o.stat("completed_instances", partial.len());
    o.files.push((BOXES.into(), write_boxes(&records).into_bytes()));
    Ok(o)
}

fn read_box_file(path: &Path) -> Result<Vec<BoxRecord>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::malformed(path, "file", "not UTF-8"))?;
    read_boxes(path, &text)
}

/// Rebuilds interpreted tracks from a box table.
pub fn tracks_from_records(
    records: &[BoxRecord],
    vocabulary: &[String],
    timeline: &Timeline,
) -> Result<Vec<ObjectTrack>> {
    let mut by_id: BTreeMap<u32, ObjectTrack> = BTreeMap::new();
    for r in records {
        let t = by_id.entry(r.instance_id).or_insert_with(|| ObjectTrack {
            instance_id: r.instance_id,
            semantic_id: vocabulary.iter().position(|c| *c == r.category).unwrap_or(0) as u16,
            category: r.category.clone(),
            motion: r.motion,
            boxes: Vec::new(),
            trajectory: Vec::new(),
        });
        t.boxes.push(FrameBox {
            frame_index: r.frame_index,
            bbox: r.bbox,
            interpolated: r.confidence < 1.0,
        });
        t.trajectory.push((
            r.frame_index,
            transform_point(timeline.pose(r.frame_index)?, &r.bbox.center),
        ));
    }
    Ok(by_id.into_values().collect())
}

fn stage_occ(config: &PipelineConfig, bundle: &SceneBundle, out: &Path) -> Result<StageOutput> {
    let labels = load_labels(out, bundle)?;
    let timeline = Timeline::from_bundle(bundle)?;
    let records = read_box_file(&out.join(Stage::Boxes.name()).join(BOXES))?;
    let tracks = tracks_from_records(&records, &bundle.vocabulary, &timeline)?;
    let frames: Vec<(u32, &[Point])> = bundle
        .frames
        .iter()
        .map(|f| (f.frame_index, f.points.as_slice()))
        .collect();
    let agg = aggregate_scene(&frames, &labels, &tracks, &timeline)?;
    let oc = &config.occupancy;
    let grids: Vec<OccupancyGrid> = bundle
        .frames
        .par_iter()
        .map(|f| {
            let pts = agg.frame_points(f.frame_index, &tracks, &timeline)?;
            let mut g = voxelize(&pts, &oc.grid, f.frame_index, oc.min_points);
            if oc.flow {
                attach_flow(&mut g, &tracks, &timeline)?;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut o = StageOutput::default();
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for g in &grids {
        total += g.voxels.len();
        for (c, n) in g.class_counts() {
            *per_class.entry(class_name(&bundle.vocabulary, c)).or_insert(0) += n;
        }
        o.files.push((
            format!("grids/{}", frame_file_name(g.frame_index, "occ")),
            encode_grid(g),
        ));
    }
    let cells = oc.grid.dims.iter().map(|d| *d as f64).product::<f64>();
    o.stat("frames", grids.len());
    o.stat("occupied_voxels", total);
    if !grids.is_empty() {
        o.stat("mean_occupancy", total as f64 / grids.len() as f64 / cells);
    }
    o.stat("voxels_per_class", serde_json::to_value(per_class).expect("serializes"));
    Ok(o)
}

fn class_name(vocabulary: &[String], id: u16) -> String {
    vocabulary
        .get(id as usize)
        .cloned()
        .unwrap_or_else(|| format!("class {id}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: Option<DetectionReport>,
    pub segmentation: Option<MiouReport>,
    pub occupancy: Option<MiouReport>,
    /// Mean end-point error over voxels of moving objects occupied in both
    /// grids, m/s.
    pub flow_epe: Option<f64>,
    pub class_names: Vec<String>,
}

/// Predictions of a run directory, whichever stages it has.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub boxes: Option<Vec<BoxRecord>>,
    pub labels: Option<Vec<LabeledPointSet>>,
    pub grids: Option<Vec<OccupancyGrid>>,
}

impl Predictions {
    pub fn load(run: &Path, bundle: &SceneBundle) -> Result<Self> {
        let b = run.join(Stage::Boxes.name()).join(BOXES);
        let boxes = if b.is_file() { Some(read_box_file(&b)?) } else { None };
        let labels = if run.join(Stage::Seg.name()).join("labels").is_dir() {
            Some(load_labels(run, bundle)?)
        } else {
            None
        };
        let gdir = run.join(Stage::Occ.name()).join("grids");
        let grids = if gdir.is_dir() {
            let mut v = Vec::new();
            for f in &bundle.frames {
                let p = gdir.join(frame_file_name(f.frame_index, "occ"));
                v.push(decode_grid(&p, &read_file(&p)?)?);
            }
            Some(v)
        } else {
            None
        };
        Ok(Self { boxes, labels, grids })
    }
}

/// Scores predictions against ground truth; FOV masking per `spec`.
pub fn evaluate(pred: &Predictions, truth: &GroundTruth, bundle: &SceneBundle, spec: &MatchSpec) -> Result<EvalReport> {
    let calibs = &bundle.calibrations;
    let detection = pred.boxes.as_ref().map(|p| {
        let pd: Vec<_> = p.iter().map(|r| r.to_detection()).collect();
        let td: Vec<_> = truth.boxes.iter().map(|r| r.to_detection()).collect();
        evaluate_detections(&pd, &td, spec, calibs)
    });

    let segmentation = match &pred.labels {
        Some(sets) if !truth.labels.is_empty() => {
            if truth.labels.len() != bundle.frames.len() {
                return Err(Error::InvalidInput(format!(
                    "truth has labels for {} frames, bundle has {}",
                    truth.labels.len(),
                    bundle.frames.len()
                )));
            }
            let reports = bundle
                .frames
                .par_iter()
                .zip(sets)
                .zip(&truth.labels)
                .map(|((frame, set), recs)| {
                    let t = LabeledPointSet::from_records(frame.frame_index, frame.points.len(), recs)?;
                    let keep = |i: usize| {
                        !spec.fov_mask || calibs.iter().any(|c| project_point(i, &frame.points[i], c).is_some())
                    };
                    let idx: Vec<usize> = (0..frame.points.len()).filter(|&i| keep(i)).collect();
                    let p: Vec<Option<u16>> = idx.iter().map(|&i| set.labels[i].semantic_id).collect();
                    let t: Vec<Option<u16>> = idx.iter().map(|&i| t.labels[i].semantic_id).collect();
                    segmentation_miou(&p, &t, &[])
                })
                .collect::<Result<Vec<_>>>()?;
            Some(MiouReport::merge(&reports))
        }
        _ => None,
    };

    let (occupancy, flow_epe) = match &pred.grids {
        Some(grids) if !truth.occupancy.is_empty() => {
            let truth_by_frame: BTreeMap<u32, &OccupancyGrid> =
                truth.occupancy.iter().map(|g| (g.frame_index, g)).collect();
            let moving: BTreeSet<u32> = truth
                .boxes
                .iter()
                .filter(|b| b.motion == MotionState::Dynamic)
                .map(|b| b.instance_id)
                .collect();
            let mut reports = Vec::new();
            let (mut err_sum, mut err_n) = (0.0f64, 0usize);
            for g in grids {
                let Some(t) = truth_by_frame.get(&g.frame_index) else {
                    continue;
                };
                let (mut p, mut t) = (g.clone(), (*t).clone());
                if spec.fov_mask {
                    p.retain_in_fov(calibs);
                    t.retain_in_fov(calibs);
                }
                reports.push(occupancy_miou(&p, &t, &[])?);
                for (idx, tv) in &t.voxels {
                    if tv.instance_id == 0 || !moving.contains(&tv.instance_id) {
                        continue;
                    }
                    if let Some(pv) = p.voxels.get(idx) {
                        let d: f64 = (0..3).map(|k| (pv.flow[k] as f64 - tv.flow[k] as f64).powi(2)).sum();
                        err_sum += d.sqrt();
                        err_n += 1;
                    }
                }
            }
            (
                Some(MiouReport::merge(&reports)),
                (err_n > 0).then(|| err_sum / err_n as f64),
            )
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        detection,
        segmentation,
        occupancy,
        flow_epe,
        class_names: bundle.vocabulary.clone(),
    })
}

pub fn render_eval_report(r: &EvalReport, spec: &MatchSpec) -> String {
    let mut s = String::new();
    match &r.detection {
        Some(d) => s.push_str(&render_detection_report(d, spec)),
        None => s.push_str("Detection: no predicted boxes\n"),
    }
    let miou = |s: &mut String, title: &str, m: &Option<MiouReport>| match m {
        Some(m) => {
            let _ = writeln!(
                s,
                "{title} (mIoU {})",
                m.miou.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v))
            );
            let _ = writeln!(s, "  {:<14} {:>8}", "class", "IoU");
            for c in &m.per_class {
                let _ = writeln!(
                    s,
                    "  {:<14} {:>8.2}",
                    class_name(&r.class_names, c.semantic_id),
                    100.0 * c.iou
                );
            }
        }
        None => {
            let _ = writeln!(s, "{title}: not evaluated");
        }
    };
    miou(&mut s, "Segmentation", &r.segmentation);
    miou(&mut s, "Occupancy", &r.occupancy);
    if let Some(e) = r.flow_epe {
        let _ = writeln!(
            s,
            "Occupancy flow: mean end-point error {e:.3} m/s on moving-object voxels"
        );
    }
    s
}

fn stage_eval(config: &PipelineConfig, bundle: &SceneBundle, out: &Path, truth_dir: &Path) -> Result<StageOutput> {
    let truth = load_truth(truth_dir)?;
    let pred = Predictions::load(out, bundle)?;
    let report = evaluate(&pred, &truth, bundle, &config.eval)?;
    let mut o = StageOutput::default();
    if let Some(m) = report.segmentation.as_ref().and_then(|m| m.miou) {
        o.stat("segmentation_miou", m);
    }
    if let Some(m) = report.occupancy.as_ref().and_then(|m| m.miou) {
        o.stat("occupancy_miou", m);
    }
    if let Some(e) = report.flow_epe {
        o.stat("flow_epe", e);
    }
    o.files.push((
        "report.json".into(),
        (serde_json::to_string_pretty(&report).expect("serializes") + "\n").into_bytes(),
    ));
    o.files.push((
        "report.txt".into(),
        render_eval_report(&report, &config.eval).into_bytes(),
    ));
    Ok(o)
}

/// Human-readable summary of a run directory.
pub fn report(run: &Path) -> Result<String> {
    let mut present = Vec::new();
    for s in Stage::ALL {
        if run.join(s.name()).join(MANIFEST).exists() {
            let m = verified_manifest(run, s)
                .map_err(|e| Error::InvalidInput(format!("incomplete run directory: stage `{}`: {e}", s.name())))?;
            present.push((s, m));
        }
    }
    if present.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} is not a run directory (no stage manifests)",
            run.display()
        )));
    }
    let mut s = String::new();
    let _ = writeln!(s, "Run {}", run.display());
    for stage in Stage::ALL {
        let Some((_, m)) = present.iter().find(|(x, _)| *x == stage) else {
            let _ = writeln!(s, "\n[{}] not run", stage.name());
            continue;
        };
        let _ = writeln!(s, "\n[{}] config {}", stage.name(), &m.config_hash[..12]);
        let mut stats = m.stats.clone();
        if stage == Stage::Seg {
            // recount from the artifacts rather than trusting the manifest
            stats.insert(
                "instances".into(),
                json!(count_instances(&run.join(stage.name()).join("labels"))?),
            );
        }
        for (k, v) in &stats {
            if stage == Stage::Eval {
                continue;
            }
            let shown = match v {
                Value::Number(n) if n.is_f64() => format!("{:.4}", n.as_f64().unwrap_or(0.0)),
                Value::Object(map) => map
                    .iter()
                    .map(|(a, b)| format!("{a}={b}"))
                    .collect::<Vec<_>>()
                    .join(", "),
                other => other.to_string(),
            };
            let _ = writeln!(s, "  {:<32} {}", k.replace('_', " "), shown);
        }
        if let Some(n) = &m.notice {
            let _ = writeln!(s, "  {n}");
        }
    }
    let _ = writeln!(s, "\nEvaluation");
    match present.iter().find(|(x, _)| *x == Stage::Eval) {
        Some((_, m)) if m.outputs.contains_key("report.txt") => {
            let text = read_file(&run.join(Stage::Eval.name()).join("report.txt"))?;
            s.push_str(&String::from_utf8_lossy(&text));
        }
        _ => {
            let _ = writeln!(s, "  omitted: the run has no ground truth to evaluate against");
        }
    }
    Ok(s)
}

/// Distinct nonzero instance ids over every label file in `dir`.
pub fn count_instances(dir: &Path) -> Result<usize> {
    let mut ids = BTreeSet::new();
    for (_, p) in list_files(dir, &[])? {
        for r in decode_labels(&p, &read_file(&p)?)? {
            if r.instance_id != 0 {
                ids.insert(r.instance_id);
            }
        }
    }
    Ok(ids.len())
}
