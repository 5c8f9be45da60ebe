//! Deformable transformer encoder over the flattened feature pyramid. Every
//! texel is a token; each layer refines all tokens with multi-scale
//! deformable attention (queries carry sine + level position, values come
//! from the current maps) followed by a feed-forward block, both residual
//! with layer norm.

use crate::attention::{sine_positional_encoding, AttentionConfig, MsDeformAttn, MultiScaleFeatures};
use crate::error::Result;
use crate::nn::{LayerNorm, Mlp, ParamSet};
use crate::tensor::{Param, RngState, Tensor};

struct EncoderLayer {
    attn: MsDeformAttn,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

pub struct Encoder {
    layers: Vec<EncoderLayer>,
    level_embed: Param,
    width: usize,
}

/// Refined pyramid plus its flattened token rows (levels stacked in order).
pub struct EncodedFrame {
    pub feats: MultiScaleFeatures,
    pub tokens: Tensor,
}

/// Rebuild per-level [C×h×w] maps from stacked token rows.
pub fn rows_to_features(rows: &Tensor, shapes: &[(usize, usize)], width: usize) -> Result<MultiScaleFeatures> {
    let mut maps = Vec::with_capacity(shapes.len());
    let mut start = 0;
    for &(h, w) in shapes {
        let chunk = rows.slice_rows(start, h * w)?;
        maps.push(chunk.transpose()?.reshape(&[width, h, w])?);
        start += h * w;
    }
    MultiScaleFeatures::new(maps)
}

impl Encoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut RngState,
        name: &str,
        cfg: AttentionConfig,
        num_layers: usize,
        ffn_dim: usize,
    ) -> Encoder {
        let width = cfg.width;
        let level_embed = ps.register(
            format!("{name}.level_embed"),
            Tensor::randn(rng, &[cfg.levels, width], 0.02).data().to_vec(),
            vec![cfg.levels, width],
        );
        let layers = (0..num_layers)
            .map(|i| EncoderLayer {
                attn: MsDeformAttn::new(ps, rng, &format!("{name}.{i}.attn"), cfg),
                norm1: LayerNorm::new(ps, &format!("{name}.{i}.norm1"), width),
                ffn: Mlp::new(ps, rng, &format!("{name}.{i}.ffn"), &[width, ffn_dim, width]),
                norm2: LayerNorm::new(ps, &format!("{name}.{i}.norm2"), width),
            })
            .collect();
        Encoder {
            layers,
            level_embed,
            width,
        }
    }

    pub fn forward(&self, feats: &MultiScaleFeatures) -> Result<EncodedFrame> {
        let c = self.width;
        let levels = feats.levels();
        let mut pos_parts = Vec::with_capacity(levels);
        let mut ref_data = Vec::new();
        let mut row_parts = Vec::with_capacity(levels);
        for li in 0..levels {
            let (h, w) = feats.shape(li);
            let le = self.level_embed.tensor().slice_rows(li, 1)?;
            pos_parts.push(sine_positional_encoding(h, w, c).add_row_broadcast(&le)?);
            for y in 0..h {
                for x in 0..w {
                    ref_data.push((x as f64 + 0.5) / w as f64);
                    ref_data.push((y as f64 + 0.5) / h as f64);
                }
            }
            row_parts.push(feats.rows(li)?);
        }
        let pos = Tensor::concat_rows(&pos_parts.iter().collect::<Vec<_>>())?;
        let total = ref_data.len() / 2;
        let refs = Tensor::from_vec(ref_data, &[total, 2])?;
        let mut x = Tensor::concat_rows(&row_parts.iter().collect::<Vec<_>>())?;

        let shapes = feats.shapes().to_vec();
        for layer in &self.layers {
            // Values are sampled from the maps as refined so far, so the
            // pyramid is rebuilt from the current rows each layer.
            let cur = rows_to_features(&x, &shapes, c)?;
            let z_in = x.add(&pos)?;
            let att = layer.attn.forward(&z_in, &refs, &cur)?;
            x = layer.norm1.forward(&x.add(&att)?)?;
            let f = layer.ffn.forward(&x)?;
            x = layer.norm2.forward(&x.add(&f)?)?;
        }
        Ok(EncodedFrame {
            feats: rows_to_features(&x, &shapes, c)?,
            tokens: x,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check_multi, Precision, PrecisionGuard};

    fn toy_cfg() -> AttentionConfig {
        AttentionConfig {
            heads: 2,
            width: 8,
            levels: 2,
            points: 2,
        }
    }

    fn toy_feats(rng: &mut RngState) -> MultiScaleFeatures {
        MultiScaleFeatures::new(vec![
            Tensor::rand_uniform(rng, &[8, 4, 4], -1.0, 1.0),
            Tensor::rand_uniform(rng, &[8, 2, 2], -1.0, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn zero_layers_pass_the_pyramid_through_unchanged() {
        let _mode = PrecisionGuard::new(Precision::F64);
        let mut ps = ParamSet::new();
        let mut rng = RngState::new(71);
        let enc = Encoder::new(&mut ps, &mut rng, "enc", toy_cfg(), 0, 16);
        let feats = toy_feats(&mut rng);
        let out = enc.forward(&feats).unwrap();
        for l in 0..2 {
            assert_eq!(out.feats.map(l).data(), feats.map(l).data());
        }
    }

    #[test]
    fn token_count_is_the_sum_of_texels_over_levels() {
        let mut ps = ParamSet::new();
        let mut rng = RngState::new(72);
        let enc = Encoder::new(&mut ps, &mut rng, "enc", toy_cfg(), 1, 16);
        let out = enc.forward(&toy_feats(&mut rng)).unwrap();
        assert_eq!(out.tokens.shape(), [4 * 4 + 2 * 2, 8]);
    }

    #[test]
    fn rows_roundtrip_matches_the_original_maps() {
        let mut rng = RngState::new(73);
        let feats = toy_feats(&mut rng);
        let rows = Tensor::concat_rows(&[&feats.rows(0).unwrap(), &feats.rows(1).unwrap()]).unwrap();
        let back = rows_to_features(&rows, feats.shapes(), 8).unwrap();
        for l in 0..2 {
            assert_eq!(back.map(l).data(), feats.map(l).data());
        }
    }

    #[test]
    fn one_layer_gradients_match_finite_differences() {
        let mut ps = ParamSet::new();
        let mut rng = RngState::new(74);
        let enc = Encoder::new(&mut ps, &mut rng, "enc", toy_cfg(), 1, 16);
        let m0 = Tensor::rand_uniform(&mut rng, &[8, 2, 2], -0.5, 0.5);
        let m1 = Tensor::rand_uniform(&mut rng, &[8, 1, 1], -0.5, 0.5);
        let probe = Tensor::rand_uniform(&mut rng, &[4 + 1, 8], -1.0, 1.0);
        let err = finite_diff_check_multi(
            |xs| {
                let feats = MultiScaleFeatures::new(vec![xs[0].clone(), xs[1].clone()])?;
                let out = enc.forward(&feats)?;
                out.tokens.mul(&probe)?.sum().reshape(&[1])
            },
            &[m0, m1],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "encoder gradient error {err}");
    }
}
