//! Whole-system gradient verification: every registered tensor op plus the
//! joint training loss on a reduced model, each compared against central
//! finite differences in 64-bit mode. The fault-injection path corrupts one
//! op's analytic gradient to prove the comparison has teeth.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FrameGroundTruth, InstanceFormer, ModelConfig};
use crate::tensor::{finite_diff_report, registered_ops, RngState, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub ops: Vec<OpReport>,
    pub all_pass: bool,
}

fn reduced_cfg() -> ModelConfig {
    ModelConfig {
        preset: "gradcheck".to_string(),
        width: 8,
        num_queries: 4,
        num_classes: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        attn_heads: 2,
        levels: 2,
        points: 2,
        ffn_dim: 16,
        memory_depth: 2,
        memory_per_frame: 2,
        tau: 0.2,
        ..ModelConfig::toy()
    }
}

fn reduced_gt() -> FrameGroundTruth {
    FrameGroundTruth {
        ids: vec![1, 2],
        classes: vec![0, 2],
        boxes: vec![[0.3, 0.3, 0.25, 0.25], [0.7, 0.72, 0.3, 0.22]],
        masks: vec![
            (0..256)
                .map(|p| {
                    let (x, y) = (p % 16, p / 16);
                    ((2..8).contains(&x) && (2..8).contains(&y)) as usize as f64
                })
                .collect(),
            (0..256)
                .map(|p| {
                    let (x, y) = (p % 16, p / 16);
                    ((9..14).contains(&x) && (9..14).contains(&y)) as usize as f64
                })
                .collect(),
        ],
    }
}

fn clip_loss(model: &InstanceFormer, frames: &[Tensor], differentiable_from: usize) -> Result<Tensor> {
    let mut state = model.new_video()?;
    let gt = reduced_gt();
    let mut total: Option<Tensor> = None;
    for (t, frame) in frames.iter().enumerate() {
        let pred = model.process_frame(&mut state, t, frame, Some(&gt))?;
        if t >= differentiable_from {
            let l = pred.loss.expect("training mode yields a loss").total;
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
    }
    Ok(total.expect("at least one supervised frame"))
}

/// Joint loss differentiated through the whole clip. Memory tokens and class
/// history are gradient-stopped by design, so their paths are disabled here
/// and checked separately on the final frame.
fn joint_loss_clip_err(seed: u64) -> Result<f64> {
    let mut cfg = reduced_cfg();
    cfg.memory_enabled = false;
    cfg.tcl_enabled = false;
    cfg.class_prior_enabled = false;
    let model = InstanceFormer::new(cfg, seed)?;
    let mut rng = RngState::new(seed ^ 0x9e3779b9);
    let frames: Vec<Tensor> = (0..2)
        .map(|_| Tensor::rand_uniform(&mut rng, &[3, 16, 16], 0.0, 1.0))
        .collect();
    finite_diff_report(&|xs: &[Tensor]| clip_loss(&model, xs, 0), &frames, 1e-5, 1.0)
}

/// Joint loss with every feature on, differentiated over the last frame only
/// (earlier frames feed the memory queue and class history as constants).
fn joint_loss_full_err(seed: u64) -> Result<f64> {
    last_frame_err(seed, |_| {})
}

fn last_frame_err(seed: u64, tweak: impl FnOnce(&mut ModelConfig)) -> Result<f64> {
    let mut cfg = reduced_cfg();
    tweak(&mut cfg);
    let model = InstanceFormer::new(cfg, seed)?;
    let mut rng = RngState::new(seed ^ 0x51ed2701);
    let frames: Vec<Tensor> = (0..3)
        .map(|_| Tensor::rand_uniform(&mut rng, &[3, 16, 16], 0.0, 1.0))
        .collect();
    let fixed = [frames[0].clone(), frames[1].clone()];
    finite_diff_report(
        &|xs: &[Tensor]| {
            let clip = [fixed[0].clone(), fixed[1].clone(), xs[0].clone()];
            clip_loss(&model, &clip, 2)
        },
        &frames[2..],
        1e-5,
        1.0,
    )
}

/// Check every registered op, then the joint loss two ways. `inject_fault`
/// corrupts the named op's analytic gradient; the run must then fail on
/// exactly that op.
pub fn run_gradcheck(inject_fault: Option<&str>, seed: u64) -> Result<GradReport> {
    let cases = registered_ops();
    if let Some(name) = inject_fault {
        let known = cases.iter().any(|c| c.name == name);
        if !known {
            return Err(Error::config(format!(
                "cannot inject a fault into unknown op {name:?}"
            )));
        }
    }
    let mut ops = Vec::with_capacity(cases.len() + 2);
    for case in &cases {
        let scale = if inject_fault == Some(case.name) { 1.05 } else { 1.0 };
        let err = case.run(seed, scale)?;
        ops.push(OpReport {
            name: case.name.to_string(),
            max_rel_err: err,
            pass: err <= GRADCHECK_TOLERANCE,
        });
    }
    for (name, err) in [
        ("joint_loss_propagation_clip", joint_loss_clip_err(seed)?),
        ("joint_loss_all_features_last_frame", joint_loss_full_err(seed)?),
    ] {
        ops.push(OpReport {
            name: name.to_string(),
            max_rel_err: err,
            pass: err <= GRADCHECK_TOLERANCE,
        });
    }
    let all_pass = ops.iter().all(|o| o.pass);
    Ok(GradReport { ops, all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_injection_fails_exactly_the_named_op() {
        let report = run_gradcheck(Some("matmul"), 11).unwrap();
        assert!(!report.all_pass);
        for op in &report.ops {
            if op.name == "matmul" {
                assert!(!op.pass, "injected fault slipped through");
            } else {
                assert!(op.pass, "collateral failure in {}", op.name);
            }
        }
    }

    #[test]
    fn unknown_fault_target_is_a_config_error() {
        assert!(run_gradcheck(Some("no_such_op"), 11).is_err());
    }

    #[test]
    fn report_lists_each_registered_op_exactly_once() {
        let report = run_gradcheck(None, 11).unwrap();
        let registered = registered_ops();
        for case in &registered {
            let hits = report.ops.iter().filter(|o| o.name == case.name).count();
            assert_eq!(hits, 1, "op {} listed {hits} times", case.name);
        }
        assert_eq!(report.ops.len(), registered.len() + 2);
        assert!(report.all_pass);
    }
}

