use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use autolabel::segmentation::decode_labels;

const SPEC: &str = r#"{
  "seed": 11,
  "frames": 6,
  "ego": {"speed": 5.0},
  "lidar": {"beams": 24, "azimuth_steps": 720},
  "cameras": {"width": 200, "height": 120, "fx": 120.0, "fy": 120.0},
  "walls": [{"start": [-10, 9], "end": [50, 9], "height": 4}],
  "objects": [
    {"position": [10, 4], "heading": 0.1},
    {"position": [16, -4], "heading": 0.0, "velocity": [6, 0]},
    {"category": "pedestrian", "dims": [0.6, 0.6, 1.8], "position": [8, -3]}
  ],
  "occupancy": {"origin": [-20, -20, -3], "voxel_size": 0.5, "dims": [80, 80, 12]}
}"#;

const CONFIG: &str = "[occupancy.grid]\norigin = [-20.0, -20.0, -3.0]\nvoxel_size = 0.5\ndims = [80, 80, 12]\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_autolabel"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    bundle: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("spec.json");
    fs::write(&spec, SPEC).unwrap();
    let config = root.join("config.toml");
    fs::write(&config, CONFIG).unwrap();
    let bundle = root.join("bundle");
    let o = run(&["synth", "--spec", s(&spec), "--out", s(&bundle)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    Fixture {
        _dir: dir,
        root,
        bundle,
        config,
    }
}

fn run_pipeline(f: &Fixture, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--bundle",
        s(&f.bundle),
        "--config",
        s(&f.config),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_run_then_cached_rerun() {
    let f = fixture();
    let out = f.root.join("run");
    let o = run_pipeline(&f, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for stage in ["assoc", "seg", "boxes", "occ", "eval"] {
        assert!(out.join(stage).join("manifest.json").is_file(), "{stage}");
    }
    assert!(out.join("boxes/boxes.tsv").is_file());
    assert!(out.join("eval/report.txt").is_file());
    assert!(!out.join("complete").exists(), "completion is off by default");

    let before = files(&out);
    let o = run_pipeline(&f, &out, &[]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).matches("up to date").count(), 5, "{}", stdout(&o));
    assert_eq!(files(&out), before);

    let report = stdout(&run(&["report", "--run", s(&out)]));
    assert_eq!(report.matches("Detection (").count(), 2, "{report}");
    assert!(report.contains("Segmentation (mIoU"));
}

#[test]
fn manifests_inline_defaults() {
    let f = fixture();
    let out = f.root.join("run");
    assert!(run_pipeline(&f, &out, &["--stages", "assoc,seg"]).status.success());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("seg/manifest.json")).unwrap()).unwrap();
    let cfg = &m["config"]["stage"];
    assert_eq!(cfg["parallax"]["kernel_size"], 15);
    assert_eq!(cfg["dbscan"]["min_pts"], 5);
    assert_eq!(m["config"]["seed"], 0);
    assert!(m["inputs"]["assoc"].is_string());
}

#[test]
fn two_runs_are_byte_identical() {
    let f = fixture();
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    assert!(run_pipeline(&f, &a, &["--seed", "5"]).status.success());
    assert!(run_pipeline(&f, &b, &["--seed", "5"]).status.success());
    assert_eq!(files(&a), files(&b));
}

#[test]
fn deleting_a_stage_reruns_it_and_its_dependents() {
    let f = fixture();
    let out = f.root.join("run");
    assert!(run_pipeline(&f, &out, &[]).status.success());
    let assoc = fs::read(out.join("assoc/manifest.json")).unwrap();
    let boxes = fs::read(out.join("boxes/boxes.tsv")).unwrap();
    fs::remove_dir_all(out.join("seg")).unwrap();
    let o = run_pipeline(&f, &out, &[]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("assoc     up to date"), "{text}");
    for stage in ["seg", "boxes", "occ", "eval"] {
        assert!(text.contains(&format!("{stage:<9} done")), "{text}");
    }
    assert_eq!(fs::read(out.join("assoc/manifest.json")).unwrap(), assoc);
    assert_eq!(fs::read(out.join("boxes/boxes.tsv")).unwrap(), boxes);
}

#[test]
fn config_change_reruns_only_affected_stages() {
    let f = fixture();
    let out = f.root.join("run");
    assert!(run_pipeline(&f, &out, &[]).status.success());
    fs::write(&f.config, format!("[occupancy]\nmin_points = 2\n{CONFIG}")).unwrap();
    let o = run_pipeline(&f, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.matches("up to date").count(), 3, "{text}");
    assert!(
        text.contains("occ       done") && text.contains("eval      done"),
        "{text}"
    );
}

#[test]
fn seg_without_association_names_the_dependency() {
    let f = fixture();
    let o = run_pipeline(&f, &f.root.join("run"), &["--stages", "seg"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`assoc`"), "{err}");
}

#[test]
fn report_counts_instances_from_label_files() {
    let f = fixture();
    let out = f.root.join("run");
    assert!(run_pipeline(&f, &out, &[]).status.success());
    let mut ids = BTreeSet::new();
    for e in fs::read_dir(out.join("seg/labels")).unwrap() {
        let p = e.unwrap().path();
        for r in decode_labels(&p, &fs::read(&p).unwrap()).unwrap() {
            if r.instance_id != 0 {
                ids.insert(r.instance_id);
            }
        }
    }
    assert!(!ids.is_empty());
    let report = stdout(&run(&["report", "--run", s(&out)]));
    let line = report
        .lines()
        .find(|l| l.trim_start().starts_with("instances "))
        .expect("instances line");
    let n: usize = line.split_whitespace().last().unwrap().parse().unwrap();
    assert_eq!(n, ids.len(), "{report}");
}

#[test]
fn run_without_truth_omits_eval() {
    let f = fixture();
    fs::remove_dir_all(f.bundle.join("truth")).unwrap();
    let out = f.root.join("run");
    let o = run_pipeline(&f, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout(&run(&["report", "--run", s(&out)]));
    assert!(!report.contains("Detection ("), "{report}");
    assert!(report.contains("no ground truth"), "{report}");
}

#[test]
fn report_rejects_incomplete_runs() {
    let f = fixture();
    let o = run(&["report", "--run", s(&f.root)]);
    assert_eq!(o.status.code(), Some(2));
    let out = f.root.join("run");
    assert!(run_pipeline(&f, &out, &[]).status.success());
    fs::remove_file(out.join("boxes/boxes.tsv")).unwrap();
    let o = run(&["report", "--run", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("boxes"));
}

#[test]
fn eval_subcommand_scores_a_run() {
    let f = fixture();
    let out = f.root.join("run");
    assert!(run_pipeline(&f, &out, &["--stages", "assoc,seg,boxes"])
        .status
        .success());
    let spec = f.root.join("match.toml");
    fs::write(&spec, "criteria = [\"iou\"]\n").unwrap();
    let o = run(&[
        "eval",
        "--pred",
        s(&out),
        "--truth",
        s(&f.bundle.join("truth")),
        "--spec",
        s(&spec),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.matches("Detection (").count(), 1, "{text}");
    assert!(text.contains("Occupancy: not evaluated"), "{text}");
}

#[test]
fn exit_codes() {
    let f = fixture();
    assert_eq!(run(&["run", "--bundle"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let bad = f.root.join("bad.toml");
    fs::write(&bad, "[boxes]\nnope = 1\n").unwrap();
    let o = run(&[
        "run",
        "--bundle",
        s(&f.bundle),
        "--config",
        s(&bad),
        "--out",
        s(&f.root.join("r")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&[
        "run",
        "--bundle",
        s(&f.root),
        "--config",
        s(&f.config),
        "--out",
        s(&f.root.join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    // a completer that always fails makes the boxes stage fail
    let failing = f.root.join("failing.toml");
    fs::write(
        &failing,
        format!("{CONFIG}[stages]\ncompletion = true\n[completion]\nthreshold = 1.0\n[completion.completer]\nkind = \"external\"\nprogram = \"false\"\n"),
    )
    .unwrap();
    let o = run(&[
        "run",
        "--bundle",
        s(&f.bundle),
        "--config",
        s(&failing),
        "--out",
        s(&f.root.join("r")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `boxes`"));
}

#[test]
fn synth_is_reproducible() {
    let f = fixture();
    let again = f.root.join("again");
    let o = run(&["synth", "--spec", s(&f.root.join("spec.json")), "--out", s(&again)]);
    assert!(o.status.success());
    assert_eq!(files(&f.bundle), files(&again));
    let bad = f.root.join("empty.json");
    fs::write(&bad, r#"{"ground": null}"#).unwrap();
    assert_eq!(
        run(&["synth", "--spec", s(&bad), "--out", s(&f.root.join("x"))])
            .status
            .code(),
        Some(2)
    );
}
