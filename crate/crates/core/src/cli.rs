//! The `cdiffdet` command line.
//!
//! Every command takes `--out <dir>` and writes exactly one `manifest.json`
//! there, alongside its artifacts. Exit codes: 0 success, 2 configuration,
//! parse or I/O error, 3 runtime contract violation. `CDIFFDET_THREADS`
//! caps the worker pool.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, generate_synthetic, image_tensor, load_coco_subset, DetectionRecord, SynthConfig,
    SynthManifest,
};
use crate::detector::{
    self, gradcheck_block, infer_with, load_checkpoint, save_checkpoint, stream_rng, train_step,
    DetectorConfig, Model, TrainState, BLOCKS,
};
use crate::diffusion::{NoiseSchedule, COSINE_OFFSET};
use crate::error::{Error, Result};
use crate::eval::coco_summary;
use crate::tensor::gradcheck::GradCheckOptions;

pub const THREADS_ENV: &str = "CDIFFDET_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "cdiffdet",
    version,
    about = "Context-aware diffusion object detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Image side in pixels (multiple of 32).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train a detector on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Total number of steps (overrides the configuration).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a detections file against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Detect objects in every image of a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ddim_steps: Option<usize>,
        /// Also write the per-step proposal trace.
        #[arg(long)]
        trace: bool,
    },
    /// Finite-difference check of the learned blocks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check only this block.
        #[arg(long)]
        block: Option<String>,
        /// Multiply tape gradients by this factor to simulate a broken
        /// backward pass.
        #[arg(long)]
        corrupt: Option<f64>,
    },
    /// Write the noise schedule as CSV.
    ScheduleDump {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        timesteps: usize,
    },
}

/// Record of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub build_id: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
}

pub fn build_id() -> String {
    format!(
        "{}+{}",
        env!("CARGO_PKG_VERSION"),
        option_env!("CDIFFDET_GIT_REV").unwrap_or("unknown")
    )
}

struct Run {
    manifest: RunManifest,
    out: PathBuf,
    started: Instant,
}

impl Run {
    fn new(command: &str, out: &Path, seed: u64, config: &impl Serialize) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Run {
            manifest: RunManifest {
                command: command.to_string(),
                config: serde_json::to_value(config)?,
                seed,
                build_id: build_id(),
                timings: BTreeMap::new(),
                outputs: Vec::new(),
                details: serde_json::Value::Null,
            },
            out: out.to_path_buf(),
            started: Instant::now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn time(&mut self, phase: &str, since: Instant) {
        self.manifest
            .timings
            .insert(phase.to_string(), since.elapsed().as_secs_f64());
    }

    fn finish(mut self) -> Result<RunManifest> {
        let total = self.started;
        self.time("total", total);
        crate::json::write(self.out.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn cmd_synth(
    common: &Common,
    n: usize,
    size: Option<usize>,
    classes: Option<usize>,
) -> Result<RunManifest> {
    let mut cfg: SynthConfig = read_config(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = size {
        cfg.size = s;
    }
    if let Some(c) = classes {
        cfg.num_classes = c;
    }
    cfg.validate()?;
    let mut run = Run::new("synth", &common.out, cfg.seed, &cfg)?;
    let t = Instant::now();
    let ds = generate_synthetic(&cfg, n)?;
    ds.save(&common.out)?;
    run.time("generate", t);
    run.path(data::ANNOTATIONS_FILE);
    run.manifest
        .outputs
        .extend(ds.samples.iter().map(|s| s.file_name.clone()));
    run.manifest.details = serde_json::to_value(SynthManifest::of(&cfg, &ds))?;
    run.finish()
}

fn check_dataset(cfg: &DetectorConfig, ds: &data::Dataset) -> Result<()> {
    if ds.categories.len() != cfg.head.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} categories, model has {} classes",
            ds.categories.len(),
            cfg.head.num_classes
        )));
    }
    Ok(())
}

fn cmd_train(
    common: &Common,
    data_dir: &Path,
    steps: Option<u64>,
    resume: &Option<PathBuf>,
) -> Result<RunManifest> {
    let (mut model, mut state) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let state = ck.state.ok_or_else(|| {
                Error::Config(format!("{} holds no optimiser state", path.display()))
            })?;
            (ck.model, state)
        }
        None => {
            let mut cfg: DetectorConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let model = Model::init(cfg)?;
            let state = TrainState::new(&model.params);
            (model, state)
        }
    };
    if let Some(s) = steps {
        model.config.train.steps = s;
    }
    model.config.validate()?;
    let ds = load_coco_subset(data_dir)?;
    check_dataset(&model.config, &ds)?;

    let mut run = Run::new("train", &common.out, model.config.seed, &model.config)?;
    let t0 = Instant::now();
    let tc = model.config.train.clone();
    let mut csv = String::from("step,total,cls,l1,giou\n");
    while state.step < tc.steps {
        let r = train_step(&mut model, &mut state, &ds)?;
        let done = state.step;
        if done % tc.log_every == 0 || done == tc.steps {
            let l = &r.loss;
            writeln!(csv, "{done},{},{},{},{}", l.total, l.cls, l.l1, l.giou)
                .expect("string write");
            eprintln!(
                "step {done}/{}: loss {:.4} (cls {:.4} l1 {:.4} giou {:.4}) grad {:.3}",
                tc.steps, l.total, l.cls, l.l1, l.giou, r.grad_norm
            );
        }
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done < tc.steps {
            let p = run.path(&format!("checkpoint_{done:06}.cdfd"));
            save_checkpoint(&p, &model, Some(&state))?;
        }
    }
    run.time("train", t0);
    let p = run.path("checkpoint.cdfd");
    save_checkpoint(&p, &model, Some(&state))?;
    let p = run.path("loss.csv");
    std::fs::write(p, csv)?;
    run.manifest.details =
        serde_json::json!({ "final_step": state.step, "images": ds.samples.len() });
    run.finish()
}

fn cmd_eval(common: &Common, data_dir: &Path, detections: &Path) -> Result<RunManifest> {
    let ds = load_coco_subset(data_dir)?;
    let records: Vec<DetectionRecord> = crate::json::read(detections)?;
    let dets = data::records_to_detections(&records, &ds.categories)?;
    let mut run = Run::new(
        "eval",
        &common.out,
        common.seed.unwrap_or(0),
        &serde_json::json!({
            "data": data_dir,
            "detections": detections,
        }),
    )?;
    let t = Instant::now();
    let report = coco_summary(&dets, &ds.ground_truth());
    run.time("eval", t);
    let p = run.path("report.json");
    crate::json::write(p, &report)?;
    let p = run.path("report.csv");
    std::fs::write(p, report.to_csv())?;
    run.manifest.details = serde_json::to_value(&report)?;
    run.finish()
}

fn cmd_infer(
    common: &Common,
    checkpoint: &Path,
    data_dir: &Path,
    ddim_steps: Option<usize>,
    trace: bool,
) -> Result<RunManifest> {
    let mut model = load_checkpoint(checkpoint)?.model;
    if let Some(s) = common.seed {
        model.config.seed = s;
    }
    if let Some(k) = ddim_steps {
        model.config.ddim_steps = k;
    }
    model.config.validate()?;
    let ds = load_coco_subset(data_dir)?;
    check_dataset(&model.config, &ds)?;
    let category_ids: Vec<u64> = ds.categories.iter().map(|c| c.id).collect();

    let mut run = Run::new("infer", &common.out, model.config.seed, &model.config)?;
    let t = Instant::now();
    let results: Vec<Result<detector::DetectionResult>> = ds
        .samples
        .par_iter()
        .map(|s| {
            let mut rng = stream_rng(model.config.seed, s.id);
            infer_with(
                &model,
                &model.config,
                &image_tensor(&[&s.image])?,
                &mut rng,
                trace,
            )
        })
        .collect();
    run.time("infer", t);
    let mut records = Vec::new();
    let mut trace_csv = String::from("image_id,step,t,proposal,x1,y1,x2,y2,score\n");
    for (s, r) in ds.samples.iter().zip(results) {
        let r = r?;
        records.extend(r.records(s.id, &category_ids)?);
        for row in &r.trace {
            let [x1, y1, x2, y2] = row.bbox;
            writeln!(
                trace_csv,
                "{},{},{},{},{x1},{y1},{x2},{y2},{}",
                s.id, row.step, row.t, row.proposal, row.score
            )
            .expect("string write");
        }
    }
    let p = run.path("detections.json");
    crate::json::write(p, &records)?;
    if trace {
        let p = run.path("trace.csv");
        std::fs::write(p, trace_csv)?;
    }
    run.manifest.details =
        serde_json::json!({ "images": ds.samples.len(), "detections": records.len() });
    run.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub block: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn cmd_gradcheck(
    common: &Common,
    block: &Option<String>,
    corrupt: Option<f64>,
) -> Result<RunManifest> {
    let seed = common.seed.unwrap_or(0);
    let blocks: Vec<String> = match block {
        Some(b) if BLOCKS.contains(&b.as_str()) => vec![b.clone()],
        Some(b) => {
            return Err(Error::Config(format!(
                "unknown block {b:?}; known blocks: {}",
                BLOCKS.join(", ")
            )));
        }
        None => BLOCKS.iter().map(|s| s.to_string()).collect(),
    };
    let opts = GradCheckOptions {
        corrupt_scale: corrupt.unwrap_or(1.0),
        ..Default::default()
    };
    let mut run = Run::new(
        "gradcheck",
        &common.out,
        seed,
        &serde_json::json!({
            "blocks": blocks,
            "eps": opts.eps,
            "corrupt_scale": opts.corrupt_scale,
            "tolerance": GRADCHECK_TOLERANCE,
        }),
    )?;
    let t = Instant::now();
    let rows: Vec<Result<GradcheckRow>> = blocks
        .par_iter()
        .map(|b| {
            let r = gradcheck_block(b, seed, &opts)?;
            Ok(GradcheckRow {
                block: b.clone(),
                coords: r.coords,
                max_rel_err: r.max_rel_err,
                pass: r.passes(GRADCHECK_TOLERANCE),
            })
        })
        .collect();
    let rows: Vec<GradcheckRow> = rows.into_iter().collect::<Result<_>>()?;
    run.time("gradcheck", t);
    let mut table = String::from("block,coords,max_rel_err,status\n");
    println!(
        "{:<14} {:>7} {:>12}  status",
        "block", "coords", "max_rel_err"
    );
    for r in &rows {
        let status = if r.pass { "pass" } else { "FAIL" };
        println!(
            "{:<14} {:>7} {:>12.3e}  {status}",
            r.block, r.coords, r.max_rel_err
        );
        writeln!(
            table,
            "{},{},{:e},{status}",
            r.block, r.coords, r.max_rel_err
        )
        .expect("string write");
    }
    let p = run.path("gradcheck.csv");
    std::fs::write(p, table)?;
    run.manifest.details = serde_json::to_value(&rows)?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.block.as_str())
        .collect();
    let manifest = run.finish()?;
    if failed.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Oracle(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_schedule_dump(common: &Common, timesteps: usize) -> Result<RunManifest> {
    let schedule = NoiseSchedule::cosine(timesteps, COSINE_OFFSET)?;
    let mut run = Run::new(
        "schedule-dump",
        &common.out,
        0,
        &serde_json::json!({
            "timesteps": timesteps,
            "offset": COSINE_OFFSET,
        }),
    )?;
    let p = run.path("schedule.csv");
    std::fs::write(p, schedule.to_csv())?;
    run.finish()
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
        })?;
        // Only the first configuration in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

/// Parse arguments and run one command, returning its manifest.
pub fn run_from<I, T>(args: I) -> Result<RunManifest>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    configure_threads()?;
    match &cli.command {
        Command::Synth {
            common,
            n,
            size,
            classes,
        } => cmd_synth(common, *n, *size, *classes),
        Command::Train {
            common,
            data,
            steps,
            resume,
        } => cmd_train(common, data, *steps, resume),
        Command::Eval {
            common,
            data,
            detections,
        } => cmd_eval(common, data, detections),
        Command::Infer {
            common,
            checkpoint,
            data,
            ddim_steps,
            trace,
        } => cmd_infer(common, checkpoint, data, *ddim_steps, *trace),
        Command::Gradcheck {
            common,
            block,
            corrupt,
        } => cmd_gradcheck(common, block, *corrupt),
        Command::ScheduleDump { common, timesteps } => cmd_schedule_dump(common, *timesteps),
    }
}

/// Process entry point: runs the command and returns the exit code.
pub fn main() -> i32 {
    let args: Vec<OsString> = std::env::args_os().collect();
    if let Err(e) = Cli::try_parse_from(&args) {
        // Help and version requests print and succeed; usage errors exit 2.
        let _ = e.print();
        return e.exit_code();
    }
    match run_from(args) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
