//! Prior propagation: carries instance queries, reference points, and class
//! distributions from one frame to the next so that query index i keeps the
//! same track identity for a whole video.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamSet};
use crate::tensor::{Param, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefMode {
    /// ref_t = sigmoid(W_ref(q_t) + logit(ref_prev)); zero offsets keep the
    /// previous point.
    Offset,
    /// ref_t = sigmoid(sigmoid(W_ref(q_t)) ⊙ ref_prev). Kept for fidelity
    /// experiments; its range is confined to (0.5, 0.7311).
    Literal,
}

#[derive(Clone, Copy, Debug)]
pub struct PropagationConfig {
    pub ref_mode: RefMode,
    /// History depth d: max class distributions remembered per query.
    pub history_depth: usize,
    pub class_prior_enabled: bool,
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_depth == 0 {
            return Err(Error::config("propagation: history depth must be ≥ 1".to_string()));
        }
        Ok(())
    }
}

/// Per-video tracking state carried between frames.
pub struct InstanceState {
    /// Final decoder embeddings of the previous frame, N×C. Tracked within
    /// a training clip so gradients flow through the hand-off.
    pub q: Tensor,
    /// Reference points, N×2 in [0,1]².
    pub refs: Tensor,
    /// Most-recent-first detached class distributions, each N×num_classes.
    pub class_history: VecDeque<Tensor>,
    /// query index → ground-truth instance id (training only).
    pub assoc: BTreeMap<usize, usize>,
    pub frame_index: usize,
}

impl InstanceState {
    pub fn new(q: Tensor, refs: Tensor, frame_index: usize) -> Result<InstanceState> {
        if refs.shape().len() != 2 || refs.shape()[1] != 2 || refs.shape()[0] != q.shape()[0] {
            return Err(Error::contract(format!(
                "instance state: queries {:?} with reference points {:?}",
                q.shape(),
                refs.shape()
            )));
        }
        if refs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(
                "instance state: reference points must lie in [0,1]²".to_string(),
            ));
        }
        Ok(InstanceState {
            q,
            refs,
            class_history: VecDeque::new(),
            assoc: BTreeMap::new(),
            frame_index,
        })
    }

    /// Record this frame's class distribution (stored detached), keeping at
    /// most `depth` entries, newest first.
    pub fn record_class(&mut self, c: &Tensor, depth: usize) {
        self.class_history.push_front(c.detach());
        self.class_history.truncate(depth);
    }

    /// One ground-truth instance may be claimed by at most one query.
    pub fn assoc_is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.assoc.values().all(|id| seen.insert(*id))
    }
}

/// Owns the propagation parameters: learned initial queries, the shared
/// reference-point head W_ref, and the temporal class map T_cls.
pub struct Propagator {
    pub cfg: PropagationConfig,
    query_embed: Param,
    w_ref: Linear,
    t_cls_w: Param,
    t_cls_b: Param,
}

impl Propagator {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut RngState,
        name: &str,
        num_queries: usize,
        width: usize,
        cfg: PropagationConfig,
    ) -> Propagator {
        cfg.validate().expect("invalid propagation config");
        let d = cfg.history_depth;
        let query_embed = ps.register(
            format!("{name}.query_embed"),
            (0..num_queries * width).map(|_| rng.normal()).collect(),
            vec![num_queries, width],
        );
        let w_ref = Linear::new(ps, rng, &format!("{name}.ref"), width, 2, true);
        // Identity start: the temporal map initially passes each frame's
        // score through unchanged.
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        let t_cls_w = ps.register(format!("{name}.t_cls.w"), eye, vec![d, d]);
        let t_cls_b = ps.register(format!("{name}.t_cls.b"), vec![0.0; d], vec![d]);
        Propagator {
            cfg,
            query_embed,
            w_ref,
            t_cls_w,
            t_cls_b,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.query_embed.shape()[0]
    }

    /// Frame-0 initialization: learned query embeddings with reference
    /// points predicted from them.
    pub fn init_queries(&self) -> Result<(Tensor, Tensor)> {
        let q0 = self.query_embed.tensor();
        let ref0 = self.w_ref.forward(&q0)?.sigmoid();
        Ok((q0, ref0))
    }

    /// Frame t>0: the current frame starts from the previous frame's final
    /// embeddings; gradients flow through within a clip.
    pub fn propagate_queries(&self, state: &InstanceState) -> Tensor {
        state.q.clone()
    }

    pub fn propagate_reference_points(&self, q_t: &Tensor, ref_prev: &Tensor) -> Result<Tensor> {
        let delta = self.w_ref.forward(q_t)?;
        match self.cfg.ref_mode {
            RefMode::Offset => {
                let p = ref_prev.clamp(1e-6, 1.0 - 1e-6);
                let logit = p.ln().sub(&p.neg().add_scalar(1.0).ln())?;
                Ok(delta.add(&logit)?.sigmoid())
            }
            RefMode::Literal => Ok(delta.sigmoid().mul(ref_prev)?.sigmoid()),
        }
    }

    /// Combine the raw class scores with a temporally weighted prior over
    /// the history (most recent first). Empty history passes c_hat through.
    ///
    /// Per scalar entry (query, class): the h available past values are
    /// mapped by the leading h×h block of T_cls, squashed, softmaxed over
    /// the temporal axis, and used as convex weights over those values.
    pub fn class_prior(&self, c_hat: &Tensor, history: &[Tensor]) -> Result<Tensor> {
        if !self.cfg.class_prior_enabled || history.is_empty() {
            return Ok(c_hat.clone());
        }
        let d = self.cfg.history_depth;
        let h = history.len();
        if h > d {
            return Err(Error::contract(format!(
                "class prior: history of {h} frames exceeds depth {d}"
            )));
        }
        let shape = c_hat.shape().to_vec();
        let flat: usize = shape.iter().product();
        let mut rows = Vec::with_capacity(h);
        for (f, entry) in history.iter().enumerate() {
            if entry.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "class prior: history frame {f} has shape {:?}, expected {shape:?}",
                    entry.shape()
                )));
            }
            if entry.is_tracked() {
                return Err(Error::contract(
                    "class prior: history entries must be detached".to_string(),
                ));
            }
            rows.push(entry.reshape(&[1, flat])?);
        }
        let rrefs: Vec<&Tensor> = rows.iter().collect();
        // ht: one row per (query, class) entry, one column per history frame.
        let ht = Tensor::concat_rows(&rrefs)?.transpose()?;
        let w_block = self
            .t_cls_w
            .tensor()
            .slice_rows(0, h)?
            .slice_cols(0, h)?;
        let b_block = self.t_cls_b.tensor().reshape(&[1, d])?.slice_cols(0, h)?;
        let scores = ht
            .matmul(&w_block.transpose()?)?
            .add_row_broadcast(&b_block.reshape(&[h])?)?
            .sigmoid();
        let weights = scores.softmax(1)?;
        let prior = weights
            .mul(&ht)?
            .matmul(&Tensor::full(&[h, 1], 1.0))?
            .reshape(&shape)?;
        c_hat.mul(&prior)
    }
}
