//! Clip-based training: each iteration samples a video and a short window of
//! consecutive frames, streams it through the model with ground truth, and
//! takes one optimizer step on the mean frame loss.

use crate::error::{Error, Result};
use crate::model::InstanceFormer;
use crate::nn::AdamW;
use crate::synthdata::Video;
use crate::tensor::{with_fresh_tape, RngState, Tensor};

pub struct TrainOptions {
    pub iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Inclusive frame-count range for sampled clips.
    pub clip_frames: (usize, usize),
    pub seed: u64,
    /// Learning-rate factor applied once at two thirds of the run.
    pub lr_drop: f64,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            iters: 300,
            lr: 1e-4,
            weight_decay: 1e-4,
            clip_frames: (3, 5),
            seed: 0,
            lr_drop: 0.1,
        }
    }
}

/// Loss components of one iteration, already averaged over the clip.
pub struct IterLog {
    pub iter: usize,
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub tcl: f64,
    pub total: f64,
}

/// Runs `opts.iters` optimizer steps, invoking `on_iter` after each one.
/// Deterministic in (model seed, opts.seed); aborts with a numeric error
/// naming the iteration if the loss leaves the finite range.
pub fn train(
    model: &InstanceFormer,
    videos: &[Video],
    opts: &TrainOptions,
    mut on_iter: impl FnMut(&IterLog),
) -> Result<()> {
    if videos.is_empty() {
        return Err(Error::config("training needs at least one video".to_string()));
    }
    let (lo, hi) = opts.clip_frames;
    if lo == 0 || lo > hi {
        return Err(Error::config(format!(
            "clip frame range {lo}..={hi} is empty or allows zero-frame clips"
        )));
    }
    let mut opt = AdamW::new(model.params(), opts.lr, opts.weight_decay);
    let mut rng = RngState::new(opts.seed).derive(0x74726169);
    let drop_at = opts.iters.saturating_mul(2) / 3;
    for iter in 0..opts.iters {
        if iter == drop_at && iter > 0 {
            let lr = opt.lr() * opts.lr_drop;
            opt.set_lr(lr);
        }
        let video = &videos[rng.below(videos.len())];
        let frames = video.num_frames();
        let len = (lo + rng.below(hi - lo + 1)).min(frames);
        let start = rng.below(frames - len + 1);

        let log = with_fresh_tape(|| -> Result<IterLog> {
            let mut state = model.new_video()?;
            let mut totals: Vec<Tensor> = Vec::with_capacity(len);
            let (mut cls, mut bbox, mut mask, mut tcl) = (0.0, 0.0, 0.0, 0.0);
            for (local_t, t) in (start..start + len).enumerate() {
                let frame = video.frame_tensor(t);
                let gt = video.ground_truth(t);
                let pred = model.process_frame(&mut state, local_t, &frame, Some(&gt))?;
                let fl = pred.loss.expect("training mode always yields a loss");
                cls += fl.cls;
                bbox += fl.bbox;
                mask += fl.mask;
                tcl += fl.tcl;
                totals.push(fl.total);
            }
            let inv = 1.0 / len as f64;
            let mut clip = totals[0].clone();
            for t in &totals[1..] {
                clip = clip.add(t)?;
            }
            let clip = clip.mul_scalar(inv);
            let total = clip.data()[0];
            if !total.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite training loss at iteration {iter}"
                )));
            }
            clip.backward()?;
            opt.step(model.params());
            Ok(IterLog {
                iter,
                cls: cls * inv,
                bbox: bbox * inv,
                mask: mask * inv,
                tcl: tcl * inv,
                total,
            })
        })?;
        on_iter(&log);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_video, VideoSpec};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            preset: "train-test".to_string(),
            width: 16,
            num_queries: 6,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 32,
            memory_depth: 2,
            memory_per_frame: 3,
            ..ModelConfig::toy()
        }
    }

    fn small_videos() -> Vec<Video> {
        let spec = VideoSpec {
            canvas: (32, 32),
            frames: 6,
            shapes: (2, 2),
            ..VideoSpec::default()
        };
        (0..2).map(|i| generate_video(&spec, 40 + i).unwrap()).collect()
    }

    #[test]
    fn logs_every_iteration_and_stays_finite() {
        let model = InstanceFormer::new(small_cfg(), 1).unwrap();
        let videos = small_videos();
        let opts = TrainOptions {
            iters: 3,
            clip_frames: (2, 3),
            ..TrainOptions::default()
        };
        let mut iters = Vec::new();
        train(&model, &videos, &opts, |log| {
            assert!(log.total.is_finite());
            assert!(log.cls >= 0.0 && log.mask >= 0.0 && log.tcl >= 0.0);
            iters.push(log.iter);
        })
        .unwrap();
        assert_eq!(iters, vec![0, 1, 2]);
    }

    #[test]
    fn a_step_changes_the_parameters_and_zero_iters_does_not() {
        let model = InstanceFormer::new(small_cfg(), 2).unwrap();
        let before: Vec<f64> = model.params().iter().flat_map(|p| p.value()).collect();
        let videos = small_videos();
        train(&model, &videos, &TrainOptions { iters: 0, ..TrainOptions::default() }, |_| {})
            .unwrap();
        let after_none: Vec<f64> =
            model.params().iter().flat_map(|p| p.value()).collect();
        assert_eq!(before, after_none, "zero iterations must not touch weights");
        train(
            &model,
            &videos,
            &TrainOptions { iters: 1, clip_frames: (2, 2), ..TrainOptions::default() },
            |_| {},
        )
        .unwrap();
        let after_one: Vec<f64> =
            model.params().iter().flat_map(|p| p.value()).collect();
        assert_ne!(before, after_one, "one step must move the weights");
    }

    #[test]
    fn same_seed_reproduces_the_loss_trace() {
        let run = || {
            let model = InstanceFormer::new(small_cfg(), 3).unwrap();
            let mut trace = Vec::new();
            train(
                &model,
                &small_videos(),
                &TrainOptions { iters: 3, clip_frames: (2, 2), ..TrainOptions::default() },
                |log| trace.push(log.total),
            )
            .unwrap();
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = InstanceFormer::new(small_cfg(), 4).unwrap();
        let err = train(&model, &[], &TrainOptions::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
