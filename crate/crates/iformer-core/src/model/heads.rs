//! Prediction heads over decoded queries: sigmoid classification, a box
//! perceptron whose center offsets are anchored at the query's reference
//! point, and a per-query dynamic-convolution mask head run on a fused
//! quarter-resolution feature map.

use crate::attention::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamSet};
use crate::tensor::{RngState, Tensor};

pub const MASK_CHANNELS: usize = 8;
/// Dynamic-conv input: fused channels plus relative (x, y) to the reference.
const DYN_IN: usize = MASK_CHANNELS + 2;
/// Three 1x1 dynamic layers (10 -> 8 -> 8 -> 1), weights and biases packed
/// into one controller output row.
const CTRL_PARAMS: usize =
    DYN_IN * MASK_CHANNELS + MASK_CHANNELS + MASK_CHANNELS * MASK_CHANNELS + MASK_CHANNELS + MASK_CHANNELS + 1;

const REF_CLAMP: f64 = 1e-4;

pub struct Heads {
    class: Linear,
    bbox: Mlp,
    controller: Mlp,
    mask_proj: Linear,
}

pub struct HeadOutputs {
    /// Sigmoid class scores [N×K], before any temporal prior.
    pub scores: Tensor,
    /// Boxes [N×4] as (cx, cy, w, h), all in [0,1].
    pub boxes: Tensor,
    /// Mask logits [N×(Hq·Wq)] at quarter resolution.
    pub mask_logits: Tensor,
    /// (Hq, Wq) of the mask plane.
    pub mask_shape: (usize, usize),
}

/// Normalized texel-center coordinates (x, y) of an h-by-w plane, as rows.
fn plane_coords(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push((x as f64 + 0.5) / w as f64);
            data.push((y as f64 + 0.5) / h as f64);
        }
    }
    Tensor::from_vec(data, &[h * w, 2]).unwrap()
}

impl Heads {
    pub fn new(ps: &mut ParamSet, rng: &mut RngState, name: &str, width: usize, num_classes: usize) -> Heads {
        Heads {
            class: Linear::new(ps, rng, &format!("{name}.class"), width, num_classes, true),
            bbox: Mlp::new(ps, rng, &format!("{name}.bbox"), &[width, width, width, 4]),
            controller: Mlp::new(ps, rng, &format!("{name}.ctrl"), &[width, width, CTRL_PARAMS]),
            mask_proj: Linear::new(ps, rng, &format!("{name}.mask_proj"), width, MASK_CHANNELS, true),
        }
    }

    /// Upsample every pyramid level to quarter resolution (twice the finest
    /// stride-8 level), sum, project to the mask channel count, ReLU.
    fn fused_mask_features(&self, feats: &MultiScaleFeatures) -> Result<(Tensor, (usize, usize))> {
        let (h0, w0) = feats.shape(0);
        let (hq, wq) = (2 * h0, 2 * w0);
        let mut fused: Option<Tensor> = None;
        for l in 0..feats.levels() {
            let (h, w) = feats.shape(l);
            let mut pts = Vec::with_capacity(hq * wq * 2);
            for y in 0..hq {
                for x in 0..wq {
                    let xn = (x as f64 + 0.5) / wq as f64;
                    let yn = (y as f64 + 0.5) / hq as f64;
                    pts.push(xn * w as f64 - 0.5);
                    pts.push(yn * h as f64 - 0.5);
                }
            }
            let pts = Tensor::from_vec(pts, &[hq * wq, 2])?;
            let up = Tensor::bilinear_rows(&feats.rows(l)?, &pts, h, w)?;
            fused = Some(match fused {
                Some(f) => f.add(&up)?,
                None => up,
            });
        }
        let f = self.mask_proj.forward(&fused.unwrap())?.relu();
        Ok((f, (hq, wq)))
    }

    pub fn forward(&self, queries: &Tensor, refs: &Tensor, feats: &MultiScaleFeatures) -> Result<HeadOutputs> {
        let n = queries.shape()[0];
        if refs.shape() != [n, 2] {
            return Err(Error::contract(format!(
                "heads need [N\u{d7}2] reference points, got {:?}",
                refs.shape()
            )));
        }
        let scores = self.class.forward(queries)?.sigmoid();

        let raw = self.bbox.forward(queries)?;
        let xy = raw.slice_cols(0, 2)?;
        let wh = raw.slice_cols(2, 2)?;
        let r = refs.clamp(REF_CLAMP, 1.0 - REF_CLAMP);
        let logit_ref = r.ln().sub(&r.neg().add_scalar(1.0).ln())?;
        let center = xy.add(&logit_ref)?.sigmoid();
        let boxes = Tensor::concat_cols(&[&center, &wh.sigmoid()])?;

        let (fmap, (hq, wq)) = self.fused_mask_features(feats)?;
        let coords = plane_coords(hq, wq);
        let params = self.controller.forward(queries)?;
        let c8 = MASK_CHANNELS;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let p = params.slice_rows(i, 1)?;
            let mut at = 0;
            let mut take = |len: usize| {
                let s = p.slice_cols(at, len);
                at += len;
                s
            };
            let w1 = take(DYN_IN * c8)?.reshape(&[DYN_IN, c8])?;
            let b1 = take(c8)?;
            let w2 = take(c8 * c8)?.reshape(&[c8, c8])?;
            let b2 = take(c8)?;
            let w3 = take(c8)?.reshape(&[c8, 1])?;
            let b3 = take(1)?;
            let neg_ref = refs.slice_rows(i, 1)?.neg();
            let rel = coords.add_row_broadcast(&neg_ref)?;
            let fin = Tensor::concat_cols(&[&fmap, &rel])?;
            let h1 = fin.matmul(&w1)?.add_row_broadcast(&b1)?.relu();
            let h2 = h1.matmul(&w2)?.add_row_broadcast(&b2)?.relu();
            let logits = h2.matmul(&w3)?.add_row_broadcast(&b3)?;
            rows.push(logits.transpose()?);
        }
        let mask_logits = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
        Ok(HeadOutputs {
            scores,
            boxes,
            mask_logits,
            mask_shape: (hq, wq),
        })
    }
}
