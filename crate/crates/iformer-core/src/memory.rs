//! Working memory over past frames: compact per-instance tokens in a
//! fixed-width FIFO queue, plus the decoder block that lets current queries
//! attend to them.
//!
//! Tokens are built from detached (query, box, class) triples so no gradient
//! reaches the frame that produced them; only the projection and embedding
//! parameters train through the memory path.

use std::collections::VecDeque;

use crate::attention::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamSet};
use crate::tensor::{Param, RngState, Tensor};

/// Compact record of one instance at one past frame.
pub struct MemoryToken {
    /// [1×C] projection of the detached (query, box, scores) triple. Carries
    /// gradient only into the projection weights, never into its sources.
    pub embedding: Tensor,
    /// Decoder query slot this instance occupied at `frame`.
    pub query_index: usize,
    /// Frame the token was captured from.
    pub frame: usize,
    /// [1×C] detached copy of the raw decoder query, kept for the temporal
    /// contrastive loss which compares pre-projection embeddings.
    pub raw_query: Tensor,
}

/// All tokens captured from a single frame.
pub struct FrameSlot {
    pub frame: usize,
    pub tokens: Vec<MemoryToken>,
}

/// FIFO of at most `depth` frame slots, each at most `per_frame` tokens.
/// Per-video state, mutated only between decoder invocations.
pub struct MemoryQueue {
    slots: VecDeque<FrameSlot>,
    depth: usize,
    per_frame: usize,
    last_frame: Option<usize>,
}

impl MemoryQueue {
    pub fn new(depth: usize, per_frame: usize) -> Result<MemoryQueue> {
        if depth == 0 || per_frame == 0 {
            return Err(Error::config(format!(
                "memory queue needs depth >= 1 and per-frame capacity >= 1, got {depth} and {per_frame}"
            )));
        }
        Ok(MemoryQueue {
            slots: VecDeque::new(),
            depth,
            per_frame,
            last_frame: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn per_frame(&self) -> usize {
        self.per_frame
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.slots.iter().map(|s| s.tokens.len()).sum()
    }

    /// Oldest slot first.
    pub fn slots(&self) -> impl Iterator<Item = &FrameSlot> {
        self.slots.iter()
    }

    /// Flattened view, oldest slot first, insertion order within a slot.
    pub fn tokens(&self) -> impl Iterator<Item = &MemoryToken> {
        self.slots.iter().flat_map(|s| s.tokens.iter())
    }

    /// Append one frame's tokens, dropping the oldest slot beyond `depth`.
    /// Frames must arrive in increasing order; a frame with no tokens is
    /// recorded but contributes no slot.
    pub fn enqueue_frame(&mut self, tokens: Vec<MemoryToken>, frame: usize) -> Result<()> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::contract(format!(
                    "memory enqueue out of order: frame {frame} after frame {last}"
                )));
            }
        }
        if tokens.len() > self.per_frame {
            return Err(Error::contract(format!(
                "memory slot overflow: {} tokens exceeds capacity {}",
                tokens.len(),
                self.per_frame
            )));
        }
        for (i, a) in tokens.iter().enumerate() {
            if a.frame != frame {
                return Err(Error::contract(format!(
                    "token stamped with frame {} enqueued under frame {frame}",
                    a.frame
                )));
            }
            if tokens[..i].iter().any(|b| b.query_index == a.query_index) {
                return Err(Error::contract(format!(
                    "duplicate query index {} within one memory slot",
                    a.query_index
                )));
            }
        }
        self.last_frame = Some(frame);
        if tokens.is_empty() {
            return Ok(());
        }
        self.slots.push_back(FrameSlot { frame, tokens });
        if self.slots.len() > self.depth {
            self.slots.pop_front();
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.last_frame = None;
    }
}

/// Which instances a frame contributes to memory.
pub enum SelectionMode<'a> {
    /// Keep the matched queries (training); truncate the lowest-confidence
    /// ones if more than `k` are matched.
    Train { matched: &'a [usize] },
    /// Keep the `k` highest-confidence queries; ties go to the lower index.
    Infer,
}

/// Query indices to store for one frame, ascending. `confidences` holds the
/// per-query top class score.
pub fn select_instances(mode: SelectionMode, confidences: &[f64], k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = match mode {
        SelectionMode::Train { matched } => {
            let mut idx = matched.to_vec();
            if idx.len() > k {
                idx.sort_by(|&a, &b| {
                    confidences[b]
                        .partial_cmp(&confidences[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                idx.truncate(k);
            }
            idx
        }
        SelectionMode::Infer => {
            let mut idx: Vec<usize> = (0..confidences.len()).collect();
            idx.sort_by(|&a, &b| {
                confidences[b]
                    .partial_cmp(&confidences[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            idx.truncate(k);
            idx
        }
    };
    picked.sort_unstable();
    picked
}

/// 1D sinusoidal code of a temporal offset, the classic transformer recipe:
/// pair j of the output oscillates at frequency 10000^(-2j/width).
pub fn sinusoid_encoding(delta: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let j = (i / 2) as f64;
            let angle = delta / 10000f64.powf(2.0 * j / width as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// The decoder's memory block: token construction, temporal-index key
/// encodings, and cross-attention from current queries into the queue.
pub struct MemoryAttention {
    pub(crate) proj: Linear,
    pub(crate) index_embed: Param,
    pub(crate) attn: MultiHeadAttention,
    pub(crate) norm: LayerNorm,
    width: usize,
    num_queries: usize,
}

impl MemoryAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut RngState,
        name: &str,
        width: usize,
        heads: usize,
        num_queries: usize,
        num_classes: usize,
    ) -> MemoryAttention {
        let proj = Linear::new(ps, rng, &format!("{name}.proj"), width + 4 + num_classes, width, true);
        let index_embed = ps.register(
            format!("{name}.index_embed"),
            (0..num_queries * width).map(|_| rng.normal()).collect(),
            vec![num_queries, width],
        );
        let attn = MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), width, heads);
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), width);
        MemoryAttention {
            proj,
            index_embed,
            attn,
            norm,
            width,
            num_queries,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    /// Build tokens for the selected queries of one frame. Sources are
    /// detached before projection. With `track` false (inference) the
    /// embeddings are detached too, so tokens outlive the tape.
    pub fn make_tokens(
        &self,
        queries: &Tensor,
        boxes: &Tensor,
        scores: &Tensor,
        selected: &[usize],
        frame: usize,
        track: bool,
    ) -> Result<Vec<MemoryToken>> {
        let n = queries.shape()[0];
        if queries.shape().len() != 2 || queries.shape()[1] != self.width {
            return Err(Error::contract(format!(
                "memory tokens need [N\u{d7}{}] queries, got {:?}",
                self.width,
                queries.shape()
            )));
        }
        if boxes.shape() != [n, 4] {
            return Err(Error::contract(format!(
                "memory tokens need [N\u{d7}4] boxes, got {:?}",
                boxes.shape()
            )));
        }
        if scores.shape().len() != 2 || scores.shape()[0] != n {
            return Err(Error::contract(format!(
                "memory tokens need [N\u{d7}K] scores, got {:?}",
                scores.shape()
            )));
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "selected query index {bad} out of range for {n} queries"
            )));
        }
        if selected.is_empty() {
            return Ok(Vec::new());
        }
        let q_det = queries.detach();
        let src = Tensor::concat_cols(&[
            &q_det.gather_rows(selected)?,
            &boxes.detach().gather_rows(selected)?,
            &scores.detach().gather_rows(selected)?,
        ])?;
        let mut emb = self.proj.forward(&src)?;
        if !track {
            emb = emb.detach();
        }
        selected
            .iter()
            .enumerate()
            .map(|(row, &i)| {
                Ok(MemoryToken {
                    embedding: emb.slice_rows(row, 1)?,
                    query_index: i,
                    frame,
                    raw_query: q_det.slice_rows(i, 1)?,
                })
            })
            .collect()
    }

    /// Key positional encoding for one token seen from frame `t`: the learned
    /// per-query-slot embedding plus a sinusoid of the relative age t−frame.
    pub fn temporal_index_embedding(&self, token: &MemoryToken, t: usize) -> Result<Tensor> {
        if t <= token.frame {
            return Err(Error::contract(format!(
                "temporal index needs a token from the past: token frame {} at current frame {t}",
                token.frame
            )));
        }
        if token.query_index >= self.num_queries {
            return Err(Error::contract(format!(
                "token query index {} out of range for {} query slots",
                token.query_index, self.num_queries
            )));
        }
        let learned = self
            .index_embed
            .tensor()
            .slice_rows(token.query_index, 1)?;
        let delta = (t - token.frame) as f64;
        let sin = Tensor::from_vec(sinusoid_encoding(delta, self.width), &[1, self.width])?;
        learned.add(&sin)
    }

    /// Cross-attention from current queries into the flattened queue, with
    /// residual and layer norm. An empty queue skips the block entirely and
    /// returns `queries` unchanged.
    pub fn forward(
        &self,
        queries: &Tensor,
        queue: &MemoryQueue,
        t: usize,
        query_pos: Option<&Tensor>,
    ) -> Result<Tensor> {
        if queue.is_empty() {
            return Ok(queries.clone());
        }
        let mut embs = Vec::with_capacity(queue.total_tokens());
        let mut kpos = Vec::with_capacity(queue.total_tokens());
        for token in queue.tokens() {
            embs.push(token.embedding.clone());
            kpos.push(self.temporal_index_embedding(token, t)?);
        }
        let erefs: Vec<&Tensor> = embs.iter().collect();
        let prefs: Vec<&Tensor> = kpos.iter().collect();
        let keys = Tensor::concat_rows(&erefs)?;
        let key_pos = Tensor::concat_rows(&prefs)?;
        let attended = self.attn.forward(queries, &keys, query_pos, Some(&key_pos))?;
        self.norm.forward(&queries.add(&attended)?)
    }
}
