//! Training losses: focal classification, L1 + generalized-overlap boxes,
//! per-pixel mask cross-entropy, a temporal contrastive term over the memory
//! queue, and their weighted combination.

pub mod matching;

pub use matching::{hungarian_match, update_matches, FrameMatches, MatchState, MatcherWeights};

use crate::error::{Error, Result};
use crate::memory::MemoryQueue;
use crate::tensor::Tensor;

/// Keeps probabilities strictly inside (0,1) before logs; wide enough to
/// survive 32-bit storage next to 1.0.
const PROB_EPS: f64 = 1e-7;

/// Coefficients of the combined training loss, plus the matcher's cost
/// weights.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub tcl: f64,
    pub matcher: MatcherWeights,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            cls: 2.0,
            bbox: 5.0,
            mask: 2.0,
            tcl: 2.0,
            matcher: MatcherWeights::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let parts = [
            self.cls,
            self.bbox,
            self.mask,
            self.tcl,
            self.matcher.class,
            self.matcher.l1,
            self.matcher.giou,
        ];
        if parts.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::config(format!(
                "loss weights must be non-negative, got cls={} box={} mask={} tcl={}",
                self.cls, self.bbox, self.mask, self.tcl
            )));
        }
        Ok(())
    }
}

/// Generalized overlap of two (cx,cy,w,h) boxes in plain arithmetic:
/// intersection over union minus the empty fraction of the enclosing box.
/// Degenerate boxes are tolerated; the result stays in [-1, 1].
pub fn giou_cxcywh(a: &[f64], b: &[f64]) -> f64 {
    let corners = |v: &[f64]| {
        (
            v[0] - v[2] * 0.5,
            v[1] - v[3] * 0.5,
            v[0] + v[2] * 0.5,
            v[1] + v[3] * 0.5,
        )
    };
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    let ew = ax1.max(bx1) - ax0.min(bx0);
    let eh = ay1.max(by1) - ay0.min(by0);
    let enclose = ew * eh;
    inter / union.max(1e-12) - (enclose - union) / enclose.max(1e-12)
}

/// Focal classification loss over all queries. `targets[q]` is the target
/// class of a matched query or None for "no object" (an all-zero row). The
/// sum is averaged by the number of matched queries.
pub fn classification_loss(
    scores: &Tensor,
    targets: &[Option<usize>],
    alpha: f64,
    gamma: f64,
) -> Result<Tensor> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::contract(format!(
            "classification needs one target per query: scores {:?} vs {} targets",
            shape,
            targets.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    if scores.has_nan() {
        return Err(Error::numeric("classification scores contain NaN".to_string()));
    }
    let mut y = vec![0.0; n * k];
    let mut matched = 0usize;
    for (q, t) in targets.iter().enumerate() {
        if let Some(cls) = t {
            if *cls >= k {
                return Err(Error::contract(format!(
                    "target class {cls} out of range for {k} classes"
                )));
            }
            y[q * k + cls] = 1.0;
            matched += 1;
        }
    }
    let at: Vec<f64> = y.iter().map(|&v| v * alpha + (1.0 - v) * (1.0 - alpha)).collect();
    let y_t = Tensor::from_vec(y, &[n, k])?;
    let at_t = Tensor::from_vec(at, &[n, k])?;

    let p = scores.clamp(PROB_EPS, 1.0 - PROB_EPS);
    // pt is the probability assigned to the correct binary outcome per entry.
    let pt = y_t
        .mul(&p)?
        .add(&y_t.neg().add_scalar(1.0).mul(&p.neg().add_scalar(1.0))?)?;
    let focal = at_t
        .mul(&pt.neg().add_scalar(1.0).pow_scalar(gamma))?
        .mul(&pt.ln().neg())?;
    Ok(focal.sum().mul_scalar(1.0 / matched.max(1) as f64))
}

/// Box regression loss for one matched pair: 5·L1 + 2·(1 − overlap), both
/// boxes normalized (cx,cy,w,h) with positive sizes.
pub fn box_loss(pred: &Tensor, gt: &[f64]) -> Result<Tensor> {
    if pred.numel() != 4 || gt.len() != 4 {
        return Err(Error::contract(format!(
            "box loss takes 4-value boxes, got {} predicted and {} target values",
            pred.numel(),
            gt.len()
        )));
    }
    let pd = pred.data();
    if pd[2] <= 0.0 || pd[3] <= 0.0 || gt[2] <= 0.0 || gt[3] <= 0.0 {
        return Err(Error::contract(format!(
            "box sizes must be positive, got predicted {}\u{d7}{} and target {}\u{d7}{}",
            pd[2], pd[3], gt[2], gt[3]
        )));
    }
    let p = pred.reshape(&[1, 4])?;
    let gt_t = Tensor::from_vec(gt.to_vec(), &[1, 4])?;
    let l1 = p.sub(&gt_t)?.abs().sum();

    let half = |t: &Tensor, lo: bool| -> Result<(Tensor, Tensor)> {
        let c = if lo { -0.5 } else { 0.5 };
        let x = t.slice_cols(0, 1)?.add(&t.slice_cols(2, 1)?.mul_scalar(c))?;
        let y = t.slice_cols(1, 1)?.add(&t.slice_cols(3, 1)?.mul_scalar(c))?;
        Ok((x, y))
    };
    let (px0, py0) = half(&p, true)?;
    let (px1, py1) = half(&p, false)?;
    let (gx0, gy0) = half(&gt_t, true)?;
    let (gx1, gy1) = half(&gt_t, false)?;

    let iw = px1.minimum(&gx1)?.sub(&px0.maximum(&gx0)?)?.relu();
    let ih = py1.minimum(&gy1)?.sub(&py0.maximum(&gy0)?)?.relu();
    let inter = iw.mul(&ih)?;
    let area_p = p.slice_cols(2, 1)?.mul(&p.slice_cols(3, 1)?)?;
    let area_g = gt[2] * gt[3];
    let union = area_p.add_scalar(area_g).sub(&inter)?;
    let ew = px1.maximum(&gx1)?.sub(&px0.minimum(&gx0)?)?;
    let eh = py1.maximum(&gy1)?.sub(&py0.minimum(&gy0)?)?;
    let enclose = ew.mul(&eh)?;
    let overlap = inter
        .div(&union)?
        .sub(&enclose.sub(&union)?.div(&enclose)?)?;

    let giou_term = overlap.neg().add_scalar(1.0).mul_scalar(2.0).reshape(&[1])?;
    l1.mul_scalar(5.0).add(&giou_term)
}

/// Mean per-pixel binary cross-entropy of mask logits against (possibly
/// soft) targets in [0,1], with an optional dice term.
pub fn mask_loss(logits: &Tensor, target: &[f64], with_dice: bool) -> Result<Tensor> {
    if logits.numel() != target.len() {
        return Err(Error::contract(format!(
            "mask target has {} values for {} logits",
            target.len(),
            logits.numel()
        )));
    }
    let t = Tensor::from_vec(target.to_vec(), logits.shape())?;
    let bce = logits.bce_with_logits(&t)?.mean();
    if !with_dice {
        return Ok(bce);
    }
    let p = logits.sigmoid();
    let num = p.mul(&t)?.sum().mul_scalar(2.0).add_scalar(1.0);
    let den = p.sum().add_scalar(target.iter().sum::<f64>() + 1.0);
    let dice = num.div(&den)?.neg().add_scalar(1.0);
    bce.add(&dice)
}

/// Average-pool a mask by an integer factor, for matching ground truth to
/// the prediction resolution. Values become block means in [0,1].
pub fn block_average(mask: &[f64], h: usize, w: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || h % factor != 0 || w % factor != 0 || mask.len() != h * w {
        return Err(Error::contract(format!(
            "cannot pool a {h}\u{d7}{w} mask of {} values by factor {factor}",
            mask.len()
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / factor) * ow + x / factor] += mask[y * w + x] * norm;
        }
    }
    Ok(out)
}

/// Contrastive coherence across time: each matched query at `t` should sit
/// close to its own stored embedding in every memory slot that has one, and
/// far from the other embeddings of that slot. Current-side embeddings carry
/// gradient; stored embeddings are detached by construction.
pub fn temporal_contrastive_loss(
    queries: &Tensor,
    matched: &[usize],
    queue: &MemoryQueue,
    tau: f64,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::contract(format!(
            "contrastive temperature must be positive, got {tau}"
        )));
    }
    if queue.is_empty() || matched.is_empty() {
        return Ok(Tensor::zeros(&[1]));
    }
    let cur = queries.gather_rows(matched)?.l2_normalize_rows()?;
    let mut terms: Vec<Tensor> = Vec::new();
    for slot in queue.slots() {
        let raws: Vec<&Tensor> = slot.tokens.iter().map(|t| &t.raw_query).collect();
        let past = Tensor::concat_rows(&raws)?.l2_normalize_rows()?;
        let probs = cur
            .matmul(&past.transpose()?)?
            .mul_scalar(1.0 / tau)
            .softmax(1)?;
        for (r, &i) in matched.iter().enumerate() {
            let pos = slot.tokens.iter().position(|t| t.query_index == i);
            if let Some(c) = pos {
                terms.push(probs.slice_rows(r, 1)?.slice_cols(c, 1)?.ln().neg());
            }
        }
    }
    if terms.is_empty() {
        return Ok(Tensor::zeros(&[1]));
    }
    let n = terms.len();
    let trefs: Vec<&Tensor> = terms.iter().collect();
    Ok(Tensor::concat_cols(&trefs)?
        .sum()
        .mul_scalar(1.0 / n as f64))
}

/// Weighted sum of the four per-frame loss parts.
pub fn joint_loss(
    cls: &Tensor,
    bbox: &Tensor,
    mask: &Tensor,
    tcl: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    w.validate()?;
    let named = [
        ("classification", cls),
        ("box", bbox),
        ("mask", mask),
        ("temporal contrastive", tcl),
    ];
    for (name, part) in named {
        if part.numel() != 1 {
            return Err(Error::contract(format!(
                "{name} loss must be scalar, got shape {:?}",
                part.shape()
            )));
        }
        if !part.data()[0].is_finite() {
            return Err(Error::numeric(format!(
                "{name} loss is not finite: {}",
                part.data()[0]
            )));
        }
    }
    cls.reshape(&[1])?
        .mul_scalar(w.cls)
        .add(&bbox.reshape(&[1])?.mul_scalar(w.bbox))?
        .add(&mask.reshape(&[1])?.mul_scalar(w.mask))?
        .add(&tcl.reshape(&[1])?.mul_scalar(w.tcl))
}
