//! Query decoder. Each layer runs query self-attention, deformable
//! cross-attention into the encoded pyramid, optionally one shared memory
//! cross-attention block, and a feed-forward block; every stage is residual
//! with layer norm. The learned query position embedding is added to
//! attention inputs only, never to the residual stream.

use crate::attention::{AttentionConfig, MsDeformAttn, MultiHeadAttention, MultiScaleFeatures};
use crate::error::Result;
use crate::memory::{MemoryAttention, MemoryQueue};
use crate::nn::{LayerNorm, Mlp, ParamSet};
use crate::tensor::{Param, RngState, Tensor};

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attn: MsDeformAttn,
    cross_norm: LayerNorm,
    ffn: Mlp,
    ffn_norm: LayerNorm,
}

pub struct Decoder {
    layers: Vec<DecoderLayer>,
    query_pos: Param,
}

/// Memory context for one decoded frame: the shared attention block, the
/// queue of past-frame tokens, and the current frame index.
pub struct MemoryContext<'a> {
    pub attn: &'a MemoryAttention,
    pub queue: &'a MemoryQueue,
    pub frame: usize,
}

impl Decoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut RngState,
        name: &str,
        cfg: AttentionConfig,
        num_layers: usize,
        ffn_dim: usize,
        num_queries: usize,
    ) -> Decoder {
        let c = cfg.width;
        let query_pos = ps.register(
            format!("{name}.query_pos"),
            Tensor::randn(rng, &[num_queries, c], 0.02).data().to_vec(),
            vec![num_queries, c],
        );
        let layers = (0..num_layers)
            .map(|i| DecoderLayer {
                self_attn: MultiHeadAttention::new(ps, rng, &format!("{name}.{i}.self"), c, cfg.heads),
                self_norm: LayerNorm::new(ps, &format!("{name}.{i}.self_norm"), c),
                cross_attn: MsDeformAttn::new(ps, rng, &format!("{name}.{i}.cross"), cfg),
                cross_norm: LayerNorm::new(ps, &format!("{name}.{i}.cross_norm"), c),
                ffn: Mlp::new(ps, rng, &format!("{name}.{i}.ffn"), &[c, ffn_dim, c]),
                ffn_norm: LayerNorm::new(ps, &format!("{name}.{i}.ffn_norm"), c),
            })
            .collect();
        Decoder { layers, query_pos }
    }

    pub fn query_pos(&self) -> Tensor {
        self.query_pos.tensor()
    }

    pub fn forward(
        &self,
        queries: &Tensor,
        refs: &Tensor,
        feats: &MultiScaleFeatures,
        memory: Option<&MemoryContext<'_>>,
    ) -> Result<Tensor> {
        let qpos = self.query_pos.tensor();
        let mut q = queries.clone();
        for layer in &self.layers {
            let sa = layer.self_attn.forward(&q, &q, Some(&qpos), Some(&qpos))?;
            q = layer.self_norm.forward(&q.add(&sa)?)?;
            let z_in = q.add(&qpos)?;
            let ca = layer.cross_attn.forward(&z_in, refs, feats)?;
            q = layer.cross_norm.forward(&q.add(&ca)?)?;
            if let Some(ctx) = memory {
                q = ctx.attn.forward(&q, ctx.queue, ctx.frame, Some(&qpos))?;
            }
            let f = layer.ffn.forward(&q)?;
            q = layer.ffn_norm.forward(&q.add(&f)?)?;
        }
        Ok(q)
    }
}
