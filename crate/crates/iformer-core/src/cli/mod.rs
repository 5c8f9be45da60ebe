//! Operator surface. Subcommands: gen-data, train, infer, eval, gradcheck,
//! ablate. Every run writes resolved-config.json into its output directory;
//! exit codes are 0 success, 1 verification failure, 2 usage or config
//! error, 3 numeric failure. IFORMER_THREADS caps worker threads.

mod ablate;
mod gradcheck;
mod infer;
mod report;
mod train;

pub use ablate::{ablation_variants, run_ablation, AblateCell, AblateOptions};
pub use gradcheck::{run_gradcheck, GradReport, OpReport, GRADCHECK_TOLERANCE};
pub use infer::{
    decode_rle, encode_rle, predict_tracks, InferSettings, TrackRecord, VideoInference,
    VideoTracks,
};
pub use report::gt_tracks;
pub use train::{train, IterLog, TrainOptions};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evalkit;
use crate::model::{InstanceFormer, ModelConfig};
use crate::synthdata::{generate_video, read_dataset, write_dataset, Video, VideoSpec};
use crate::tensor::{Precision, PrecisionGuard};

#[derive(Parser)]
#[command(
    name = "iformer",
    version,
    about = "Online video instance segmentation: synthetic data, training, streaming inference, metrics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic shape-video dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Stream a checkpoint over a dataset and write tracks.json.
    Infer(InferArgs),
    /// Score tracks.json against dataset ground truth.
    Eval(EvalArgs),
    /// Check every registered gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score the feature-ablation grid and memory sweeps.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

impl PrecisionArg {
    fn guard(self) -> PrecisionGuard {
        PrecisionGuard::new(match self {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        })
    }

    fn name(self) -> &'static str {
        match self {
            PrecisionArg::F32 => "f32",
            PrecisionArg::F64 => "f64",
        }
    }
}

pub fn main_entry() {
    std::process::exit(run_from(std::env::args_os()));
}

/// Parse and dispatch; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let out = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Infer(a) => cmd_infer(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Gradcheck(a) => cmd_gradcheck(&a),
        Cmd::Ablate(a) => cmd_ablate(&a),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Worker-thread budget: IFORMER_THREADS if set, else the machine's.
pub fn worker_threads() -> usize {
    std::env::var("IFORMER_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Index-stable parallel map over 0..n with at most `threads` workers.
pub(crate) fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = threads.max(1).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|j| {
                let f = &f;
                s.spawn(move || {
                    let mut acc = Vec::new();
                    let mut i = j;
                    while i < n {
                        acc.push((i, f(i)));
                        i += workers;
                    }
                    acc
                })
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                out[i] = Some(v);
            }
        }
    });
    out.into_iter().map(|o| o.unwrap()).collect()
}

fn write_resolved_config(
    out: &Path,
    command: &str,
    seed: u64,
    precision: &str,
    args: &impl Serialize,
    model: Option<&ModelConfig>,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let doc = serde_json::json!({
        "command": command,
        "seed": seed,
        "precision": precision,
        "threads": worker_threads(),
        "args": args,
        "model": model,
    });
    fs::write(out.join("resolved-config.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn dir_bytes(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let meta = entry.metadata()?;
        total += if meta.is_dir() {
            dir_bytes(&entry.path())?
        } else {
            meta.len()
        };
    }
    Ok(total)
}

// ── gen-data ────────────────────────────────────────────────────────

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub videos: usize,
    #[arg(long, default_value_t = 24)]
    pub frames: usize,
    /// Square canvas edge in pixels (multiple of 16).
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
    #[arg(long, default_value_t = 2)]
    pub min_shapes: usize,
    #[arg(long, default_value_t = 6)]
    pub max_shapes: usize,
    /// Fix the shape count exactly (overrides min/max).
    #[arg(long)]
    pub shapes: Option<usize>,
    /// Probability that a shape pair is steered to cross mid-video.
    #[arg(long, default_value_t = 0.7)]
    pub crossing_rate: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

pub fn dataset_spec(args: &GenDataArgs) -> VideoSpec {
    let shapes = match args.shapes {
        Some(n) => (n, n),
        None => (args.min_shapes, args.max_shapes),
    };
    VideoSpec {
        canvas: (args.canvas, args.canvas),
        frames: args.frames,
        shapes,
        crossing_rate: args.crossing_rate,
        ..VideoSpec::default()
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<i32> {
    let spec = dataset_spec(args);
    spec.validate()?;
    let results = parallel_map(args.videos, worker_threads(), |i| {
        generate_video(&spec, args.seed.wrapping_add(i as u64))
    });
    let videos: Result<Vec<Video>> = results.into_iter().collect();
    let videos = videos?;
    write_dataset(&videos, &args.out)?;
    write_resolved_config(&args.out, "gen-data", args.seed, "f64", args, None)?;
    println!(
        "wrote {} videos ({} bytes) to {}",
        videos.len(),
        dir_bytes(&args.out)?,
        args.out.display()
    );
    Ok(0)
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory: checkpoint/, loss.csv, resolved-config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Model preset: "toy" or "paper".
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Full model-config JSON replacing the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the checkpoint every this many iterations.
    #[arg(long, default_value_t = 100)]
    pub save_every: usize,
    #[arg(long, default_value_t = 3)]
    pub clip_min: usize,
    #[arg(long, default_value_t = 5)]
    pub clip_max: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
    /// Re-initialize queries each frame instead of carrying them over.
    #[arg(long)]
    pub no_query_prop: bool,
    /// Re-initialize reference points each frame.
    #[arg(long)]
    pub no_ref_prop: bool,
    /// Skip blending previous class distributions into the scores.
    #[arg(long)]
    pub no_class_prior: bool,
    /// Disable the memory queue (implies no contrastive loss).
    #[arg(long)]
    pub no_memory: bool,
    /// Disable the temporal contrastive loss.
    #[arg(long)]
    pub no_tcl: bool,
    #[arg(long)]
    pub memory_depth: Option<usize>,
    #[arg(long)]
    pub memory_per_frame: Option<usize>,
}

pub fn resolve_model_config(args: &TrainArgs) -> Result<ModelConfig> {
    let mut cfg = match args.config.as_deref() {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => match args.preset.as_str() {
            "toy" => ModelConfig::toy(),
            "paper" => ModelConfig::paper(),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected \"toy\" or \"paper\""
                )))
            }
        },
    };
    if args.no_query_prop {
        cfg.query_propagation = false;
    }
    if args.no_ref_prop {
        cfg.ref_propagation = false;
    }
    if args.no_class_prior {
        cfg.class_prior_enabled = false;
    }
    if args.no_memory {
        cfg.memory_enabled = false;
        cfg.tcl_enabled = false;
    }
    if args.no_tcl {
        cfg.tcl_enabled = false;
    }
    if let Some(d) = args.memory_depth {
        cfg.memory_depth = d;
    }
    if let Some(k) = args.memory_per_frame {
        cfg.memory_per_frame = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let _mode = args.precision.guard();
    let cfg = resolve_model_config(args)?;
    let videos = read_dataset(&args.data)?;
    write_resolved_config(&args.out, "train", args.seed, args.precision.name(), args, Some(&cfg))?;

    let model = InstanceFormer::new(cfg.clone(), args.seed)?;
    let ckpt = args.out.join("checkpoint");
    let save = |model: &InstanceFormer| -> Result<()> {
        model.save_checkpoint(&ckpt)?;
        fs::write(ckpt.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
        Ok(())
    };

    let mut csv = String::from("iter,cls,bbox,mask,tcl,total\n");
    let opts = TrainOptions {
        iters: args.iters,
        lr: args.lr,
        weight_decay: args.weight_decay,
        clip_frames: (args.clip_min, args.clip_max),
        seed: args.seed,
        lr_drop: 0.1,
    };
    let mut save_err: Result<()> = Ok(());
    let result = train(&model, &videos, &opts, |log| {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            log.iter, log.cls, log.bbox, log.mask, log.tcl, log.total
        ));
        if args.save_every > 0 && (log.iter + 1) % args.save_every == 0 && save_err.is_ok() {
            save_err = save(&model);
        }
        if log.iter % 10 == 0 || log.iter + 1 == args.iters {
            println!("iter {:>5}  loss {:.4}", log.iter, log.total);
        }
    });
    // Persist the loss log even when training aborts mid-run.
    fs::write(args.out.join("loss.csv"), &csv)?;
    result?;
    save_err?;
    save(&model)?;
    println!("checkpoint saved to {}", ckpt.display());
    Ok(0)
}

// ── infer ───────────────────────────────────────────────────────────

#[derive(Args, Serialize)]
pub struct InferArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tracks kept per video, ranked by early-frame confidence.
    #[arg(long, default_value_t = 10)]
    pub k_top: usize,
    /// Write per-frame PPM overlays under out/overlays/.
    #[arg(long)]
    pub overlay: bool,
    /// Write per-frame query embeddings to embeddings.csv.
    #[arg(long)]
    pub embeddings: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

fn load_checkpoint_model(dir: &Path) -> Result<InstanceFormer> {
    let cfg_path = dir.join("config.json");
    let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(&cfg_path)?)?;
    let model = InstanceFormer::new(cfg, 0)?;
    model.load_checkpoint(dir)?;
    Ok(model)
}

pub fn cmd_infer(args: &InferArgs) -> Result<i32> {
    let _mode = args.precision.guard();
    let model = load_checkpoint_model(&args.checkpoint)?;
    let videos = read_dataset(&args.data)?;
    write_resolved_config(
        &args.out,
        "infer",
        0,
        args.precision.name(),
        args,
        Some(model.config()),
    )?;

    let settings = InferSettings {
        k_top: args.k_top,
        ..InferSettings::default()
    };
    let mut all = Vec::with_capacity(videos.len());
    let mut embeddings_csv = String::from("video,frame,query,values\n");
    for (vi, video) in videos.iter().enumerate() {
        let name = format!("video_{vi:04}");
        let out = predict_tracks(&model, video, &settings)?;
        if args.overlay {
            let dir = args.out.join("overlays").join(&name);
            infer::write_overlays(&dir, video, &out)?;
        }
        if args.embeddings {
            for (t, frame) in out.embeddings.iter().enumerate() {
                for (q, row) in frame.iter().enumerate() {
                    let joined: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                    embeddings_csv
                        .push_str(&format!("{vi},{t},{q},{}\n", joined.join(";")));
                }
            }
        }
        all.push(VideoTracks {
            video: name,
            height: video.height,
            width: video.width,
            frames: video.num_frames(),
            tracks: out.tracks,
        });
    }
    fs::write(args.out.join("tracks.json"), serde_json::to_string_pretty(&all)?)?;
    if args.embeddings {
        fs::write(args.out.join("embeddings.csv"), embeddings_csv)?;
    }
    println!(
        "wrote {} videos of tracks to {}",
        all.len(),
        args.out.join("tracks.json").display()
    );
    Ok(0)
}

// ── eval ────────────────────────────────────────────────────────────

#[derive(Args, Serialize)]
pub struct EvalArgs {
    /// tracks.json written by infer.
    #[arg(long)]
    pub tracks: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let videos = read_dataset(&args.data)?;
    let recorded: Vec<VideoTracks> = serde_json::from_str(&fs::read_to_string(&args.tracks)?)?;
    if recorded.len() != videos.len() {
        return Err(Error::config(format!(
            "tracks.json covers {} videos, dataset has {}",
            recorded.len(),
            videos.len()
        )));
    }
    write_resolved_config(&args.out, "eval", 0, "f64", args, None)?;

    let preds: Result<Vec<_>> = recorded.iter().map(|vt| vt.to_eval_tracks()).collect();
    let preds = preds?;
    let gts: Vec<_> = videos.iter().map(gt_tracks).collect();
    let metrics = evalkit::evaluate(&preds, &gts, &evalkit::default_thresholds())?;
    evalkit::write_metrics(&args.out.join("metrics.json"), &metrics)?;
    println!(
        "AP {:.3}  AP50 {:.3}  AP75 {:.3}  AR1 {:.3}  AR10 {:.3}  id-switches {}",
        metrics.overall.ap,
        metrics.overall.ap50,
        metrics.overall.ap75,
        metrics.overall.ar1,
        metrics.overall.ar10,
        metrics.id_switches
    );
    Ok(0)
}

// ── gradcheck ───────────────────────────────────────────────────────

#[derive(Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "gradcheck-report")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Corrupt the named op's analytic gradient to prove the check bites.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    // Finite differences are meaningless in quantized mode; force 64-bit.
    write_resolved_config(&args.out, "gradcheck", args.seed, "f64", args, None)?;
    let report = run_gradcheck(args.inject_fault.as_deref(), args.seed)?;
    for op in &report.ops {
        println!(
            "{:<36} {:>12.3e}  {}",
            op.name,
            op.max_rel_err,
            if op.pass { "ok" } else { "FAIL" }
        );
    }
    fs::write(
        args.out.join("gradcheck.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if report.all_pass {
        println!("all {} checks within {GRADCHECK_TOLERANCE:.0e}", report.ops.len());
        Ok(0)
    } else {
        let failed: Vec<&str> = report
            .ops
            .iter()
            .filter(|o| !o.pass)
            .map(|o| o.name.as_str())
            .collect();
        println!("gradient check failed for: {}", failed.join(", "));
        Ok(1)
    }
}

// ── ablate ──────────────────────────────────────────────────────────

#[derive(Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds per variant (0-based, offset by --seed).
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 150)]
    pub iters: usize,
    /// Skip the memory depth/token sweeps and run only the variant grid.
    #[arg(long)]
    pub variants_only: bool,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<i32> {
    let videos = read_dataset(&args.data)?;
    write_resolved_config(&args.out, "ablate", args.seed, "f32", args, None)?;
    let opts = AblateOptions {
        iters: args.iters,
        base_seed: args.seed,
        seeds: args.seeds,
        sweeps: !args.variants_only,
    };
    let cells = run_ablation(&videos, &opts)?;
    let mut csv = String::from("kind,name,seed,ap,ap50,id_switches\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{:.4},{:.4},{}\n",
            c.kind, c.name, c.seed, c.ap, c.ap50, c.id_switches
        ));
        println!(
            "{:<8} {:<18} seed {}  AP {:.3}  AP50 {:.3}  switches {}",
            c.kind, c.name, c.seed, c.ap, c.ap50, c.id_switches
        );
    }
    fs::write(args.out.join("ablation.csv"), csv)?;
    Ok(0)
}
