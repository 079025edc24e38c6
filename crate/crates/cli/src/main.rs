use std::path::{Path, PathBuf};
use std::process::ExitCode;

use autolabel::pipeline::{self, PipelineConfig, RunOptions, Stage, StageStatus};
use autolabel::synth::{self, ScenarioSpec};
use autolabel::{bundle_io, eval::MatchSpec, Error};
use clap::{Parser, Subcommand};

/// Offboard auto-labeling: 3D segmentation, box tracks and occupancy from
/// multi-view mask tracks and LiDAR.
#[derive(Parser)]
#[command(name = "autolabel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the labeling pipeline on a scene bundle.
    Run {
        #[arg(long)]
        bundle: PathBuf,
        /// TOML pipeline config; missing keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of assoc,seg,complete,boxes,occ,eval.
        #[arg(long)]
        stages: Option<String>,
        /// Worker threads (overrides the config).
        #[arg(long)]
        jobs: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Generate a synthetic bundle with ground truth.
    Synth {
        /// Scenario spec, JSON or TOML.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run directory against ground truth.
    Eval {
        /// Run directory.
        #[arg(long)]
        pred: PathBuf,
        /// Bundle directory with `truth/`, or the `truth/` directory itself.
        #[arg(long)]
        truth: PathBuf,
        /// Match spec, TOML or JSON.
        #[arg(long)]
        spec: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Stage { .. } => Failure::Stage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn read_structured<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|x| x == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            bundle,
            config,
            stages,
            jobs,
            seed,
            out,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let stages = stages.as_deref().map(Stage::parse_list).transpose()?;
            let statuses = pipeline::run(&cfg, &RunOptions { bundle, out, stages })?;
            for (s, st) in statuses {
                let what = match st {
                    StageStatus::Ran => "done",
                    StageStatus::Cached => "up to date",
                };
                println!("{:<9} {what}", s.name());
            }
        }
        Command::Report { run } => print!("{}", pipeline::report(&run)?),
        Command::Synth { spec, out } => {
            let spec: ScenarioSpec = read_structured(&spec)?;
            let (bundle, truth) = synth::generate(&spec)?;
            synth::write_scenario(&spec, &bundle, &truth, &out)?;
            println!(
                "{} frames, {} views, {} objects written to {}",
                bundle.frames.len(),
                bundle.calibrations.len(),
                spec.objects.len(),
                out.display()
            );
        }
        Command::Eval { pred, truth, spec } => {
            let spec: MatchSpec = read_structured(&spec)?;
            spec.validate()?;
            let (bundle_dir, truth_dir) = if truth.join("truth").join("boxes.tsv").is_file() {
                (truth.clone(), truth.join("truth"))
            } else {
                let parent = truth.parent().map(Path::to_path_buf).unwrap_or_default();
                (parent, truth.clone())
            };
            if !bundle_dir.join("calib.json").is_file() {
                return Err(Failure::Data(format!(
                    "{}: cannot locate the scene bundle (calib.json) next to the truth directory",
                    truth.display()
                )));
            }
            let bundle = bundle_io::load_bundle(&bundle_dir)?;
            let truth = synth::load_truth(&truth_dir)?;
            let predictions = pipeline::Predictions::load(&pred, &bundle)?;
            let report = pipeline::evaluate(&predictions, &truth, &bundle, &spec)?;
            print!("{}", pipeline::render_eval_report(&report, &spec));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Stage(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
