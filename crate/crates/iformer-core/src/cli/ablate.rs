//! Feature-ablation grid: cumulative variants from bare query propagation up
//! to the full model with memory attention and contrastive training, each
//! trained and scored per seed, plus sweeps over memory depth and tokens per
//! frame. Cells run in parallel up to the worker-thread budget; each cell is
//! deterministic in its own seed.

use crate::error::Result;
use crate::evalkit::{self, Track};
use crate::model::{InstanceFormer, ModelConfig};
use crate::synthdata::Video;

use super::infer::{predict_tracks, InferSettings};
use super::report::gt_tracks;
use super::train::{train, TrainOptions};
use super::{parallel_map, worker_threads};

/// Cumulative variant grid, weakest first. Each entry strips the later
/// features from a full config.
pub fn ablation_variants() -> Vec<(&'static str, fn(&mut ModelConfig))> {
    vec![
        ("query", |c: &mut ModelConfig| {
            c.ref_propagation = false;
            c.class_prior_enabled = false;
            c.memory_enabled = false;
            c.tcl_enabled = false;
        }),
        ("query_ref", |c: &mut ModelConfig| {
            c.class_prior_enabled = false;
            c.memory_enabled = false;
            c.tcl_enabled = false;
        }),
        ("prior", |c: &mut ModelConfig| {
            c.memory_enabled = false;
            c.tcl_enabled = false;
        }),
        ("prior_memory", |c: &mut ModelConfig| {
            c.tcl_enabled = false;
        }),
        ("prior_memory_tcl", |_: &mut ModelConfig| {}),
    ]
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub iters: usize,
    pub base_seed: u64,
    /// Number of seeds per cell: base_seed, base_seed+1, ..
    pub seeds: u64,
    /// Also sweep memory depth {2,3,4,8} and tokens per frame {5,10,15,20}.
    pub sweeps: bool,
}

#[derive(Clone, Debug)]
pub struct AblateCell {
    pub kind: String,
    pub name: String,
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub id_switches: usize,
}

/// Reduced width so a full grid stays desk-scale; every feature flag still
/// routes through the real model. Queries stay at 20 so the widest
/// tokens-per-frame sweep value remains storable.
pub fn ablation_base_config() -> ModelConfig {
    ModelConfig {
        preset: "ablate".to_string(),
        width: 32,
        num_queries: 20,
        encoder_layers: 1,
        decoder_layers: 2,
        ffn_dim: 64,
        memory_depth: 3,
        memory_per_frame: 4,
        ..ModelConfig::toy()
    }
}

/// Train one configuration and score it on its own training videos.
pub fn run_cell(cfg: &ModelConfig, videos: &[Video], iters: usize, seed: u64) -> Result<(f64, f64, usize)> {
    let model = InstanceFormer::new(cfg.clone(), seed)?;
    let opts = TrainOptions {
        iters,
        seed,
        ..TrainOptions::default()
    };
    train(&model, videos, &opts, |_| {})?;
    score_model(&model, videos)
}

/// (AP, AP50, id switches) of a trained model over a video set.
pub fn score_model(model: &InstanceFormer, videos: &[Video]) -> Result<(f64, f64, usize)> {
    let settings = InferSettings {
        k_top: model.config().num_queries,
        keep_embeddings: false,
        ..InferSettings::default()
    };
    let mut preds: Vec<Vec<Track>> = Vec::with_capacity(videos.len());
    let mut gts = Vec::with_capacity(videos.len());
    for v in videos {
        let inference = predict_tracks(model, v, &settings)?;
        let vt = super::infer::VideoTracks {
            video: String::new(),
            height: v.height,
            width: v.width,
            frames: v.num_frames(),
            tracks: inference.tracks,
        };
        preds.push(vt.to_eval_tracks()?);
        gts.push(gt_tracks(v));
    }
    let metrics = evalkit::evaluate(&preds, &gts, &evalkit::default_thresholds())?;
    Ok((metrics.overall.ap, metrics.overall.ap50, metrics.id_switches))
}

pub fn run_ablation(videos: &[Video], opts: &AblateOptions) -> Result<Vec<AblateCell>> {
    let mut jobs: Vec<(String, String, u64, ModelConfig)> = Vec::new();
    for (name, strip) in ablation_variants() {
        for s in 0..opts.seeds.max(1) {
            let mut cfg = ablation_base_config();
            strip(&mut cfg);
            jobs.push(("variant".into(), name.into(), opts.base_seed + s, cfg));
        }
    }
    if opts.sweeps {
        for d in [2usize, 3, 4, 8] {
            let mut cfg = ablation_base_config();
            cfg.memory_depth = d;
            jobs.push(("d_sweep".into(), format!("d{d}"), opts.base_seed, cfg));
        }
        for k in [5usize, 10, 15, 20] {
            let mut cfg = ablation_base_config();
            cfg.memory_per_frame = k;
            jobs.push(("k_sweep".into(), format!("k{k}"), opts.base_seed, cfg));
        }
    }
    let results = parallel_map(jobs.len(), worker_threads(), |i| {
        let (_, _, seed, cfg) = &jobs[i];
        run_cell(cfg, videos, opts.iters, *seed)
    });
    jobs.into_iter()
        .zip(results)
        .map(|((kind, name, seed, _), res)| {
            let (ap, ap50, id_switches) = res?;
            Ok(AblateCell {
                kind,
                name,
                seed,
                ap,
                ap50,
                id_switches,
            })
        })
        .collect()
}
