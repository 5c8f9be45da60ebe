//! Attention blocks: standard multi-head attention and multi-scale
//! deformable attention over sparse sampled locations, plus the fixed 2-D
//! sine positional encoding.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamSet};
use crate::tensor::{RngState, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    /// Heads M.
    pub heads: usize,
    /// Model width C.
    pub width: usize,
    /// Feature levels L.
    pub levels: usize,
    /// Sampling points per level K.
    pub points: usize,
}

impl AttentionConfig {
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "attention: width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.levels == 0 || self.points == 0 {
            return Err(Error::config(
                "attention: levels and points must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-level feature maps of equal channel width and strictly shrinking
/// spatial extent.
#[derive(Debug)]
pub struct MultiScaleFeatures {
    maps: Vec<Tensor>,
    shapes: Vec<(usize, usize)>,
}

impl MultiScaleFeatures {
    pub fn new(maps: Vec<Tensor>) -> Result<MultiScaleFeatures> {
        if maps.is_empty() {
            return Err(Error::contract("multi-scale features: no levels".to_string()));
        }
        let mut shapes = Vec::with_capacity(maps.len());
        let mut width = None;
        for m in &maps {
            let (c, h, w) = match m.shape() {
                [c, h, w] => (*c, *h, *w),
                s => {
                    return Err(Error::contract(format!(
                        "multi-scale features: level must be [C×H×W], got {s:?}"
                    )))
                }
            };
            match width {
                None => width = Some(c),
                Some(c0) if c0 != c => {
                    return Err(Error::contract(format!(
                        "multi-scale features: channel width {c} differs from {c0}"
                    )))
                }
                _ => {}
            }
            if let Some(&(ph, pw)) = shapes.last() {
                if h >= ph || w >= pw {
                    return Err(Error::contract(format!(
                        "multi-scale features: level {h}x{w} does not shrink from {ph}x{pw}"
                    )));
                }
            }
            shapes.push((h, w));
        }
        Ok(MultiScaleFeatures { maps, shapes })
    }

    pub fn levels(&self) -> usize {
        self.maps.len()
    }

    pub fn width(&self) -> usize {
        self.maps[0].shape()[0]
    }

    pub fn map(&self, l: usize) -> &Tensor {
        &self.maps[l]
    }

    pub fn shape(&self, l: usize) -> (usize, usize) {
        self.shapes[l]
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    /// Level `l` as [(H·W)×C] rows, texel row index `y·W + x`.
    pub fn rows(&self, l: usize) -> Result<Tensor> {
        let (h, w) = self.shapes[l];
        let c = self.width();
        self.maps[l].reshape(&[c, h * w])?.transpose()
    }
}

/// Scaled dot-product attention over S key/value rows, M heads. Positional
/// encodings enter the query/key projections only; the residual connection
/// is the caller's.
pub struct MultiHeadAttention {
    pub(crate) wq: Linear,
    pub(crate) wk: Linear,
    pub(crate) wv: Linear,
    pub(crate) wo: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut RngState,
        name: &str,
        width: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert!(width % heads == 0, "width {width} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}.q"), width, width, true),
            wk: Linear::new(ps, rng, &format!("{name}.k"), width, width, true),
            wv: Linear::new(ps, rng, &format!("{name}.v"), width, width, true),
            wo: Linear::new(ps, rng, &format!("{name}.o"), width, width, true),
            heads,
        }
    }

    pub fn forward(
        &self,
        queries: &Tensor,
        keys_values: &Tensor,
        query_pos: Option<&Tensor>,
        key_pos: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (out, _) = self.forward_detailed(queries, keys_values, query_pos, key_pos)?;
        Ok(out)
    }

    /// Also returns the per-head attention weights, stacked [M·N × S].
    pub fn forward_detailed(
        &self,
        queries: &Tensor,
        keys_values: &Tensor,
        query_pos: Option<&Tensor>,
        key_pos: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let s = keys_values.shape()[0];
        if s == 0 {
            return Err(Error::contract(
                "attention: empty key/value set; caller must skip the block".to_string(),
            ));
        }
        let q_in = match query_pos {
            Some(p) => queries.add(p)?,
            None => queries.clone(),
        };
        let k_in = match key_pos {
            Some(p) => keys_values.add(p)?,
            None => keys_values.clone(),
        };
        let q = self.wq.forward(&q_in)?;
        let k = self.wk.forward(&k_in)?;
        let v = self.wv.forward(keys_values)?;
        let hw = q.shape()[1] / self.heads;
        let scale = 1.0 / (hw as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let qh = q.slice_cols(m * hw, hw)?;
            let kh = k.slice_cols(m * hw, hw)?;
            let vh = v.slice_cols(m * hw, hw)?;
            let logits = qh.matmul(&kh.transpose()?)?.mul_scalar(scale);
            let a = logits.softmax(1)?;
            head_outs.push(a.matmul(&vh)?);
            head_weights.push(a);
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        let out = self.wo.forward(&Tensor::concat_cols(&refs)?)?;
        let wrefs: Vec<&Tensor> = head_weights.iter().collect();
        Ok((out, Tensor::concat_rows(&wrefs)?))
    }
}

/// Pixel sampling locations per level for deformable attention.
///
/// `refs` is [N×2] in normalized [0,1]²; `offsets` is [(N·M·L·K)×2] in raw
/// pixel units, rows ordered (query, head, level, point). Returns one
/// [(N·M·K)×2] tensor per level, rows ordered (query, head, point):
/// `loc = (ref_x·W_l − 0.5, ref_y·H_l − 0.5) + Δp`.
pub fn compute_sampling_locations(
    refs: &Tensor,
    offsets: &Tensor,
    heads: usize,
    levels: usize,
    points: usize,
    level_shapes: &[(usize, usize)],
) -> Result<Vec<Tensor>> {
    let n = refs.shape()[0];
    if refs.shape() != [n, 2] {
        return Err(Error::contract(format!(
            "sampling locations: refs must be [N×2], got {:?}",
            refs.shape()
        )));
    }
    if offsets.shape() != [n * heads * levels * points, 2] {
        return Err(Error::contract(format!(
            "sampling locations: offsets shape {:?} does not match N={n} M={heads} L={levels} K={points}",
            offsets.shape()
        )));
    }
    if level_shapes.len() != levels {
        return Err(Error::contract(format!(
            "sampling locations: {} level shapes for {levels} levels",
            level_shapes.len()
        )));
    }
    let mut per_level = Vec::with_capacity(levels);
    let rep: Vec<usize> = (0..n)
        .flat_map(|q| std::iter::repeat(q).take(heads * points))
        .collect();
    for (l, &(h, w)) in level_shapes.iter().enumerate() {
        let ref_px = refs.col_affine(&[w as f64, h as f64], &[-0.5, -0.5])?;
        let ref_rows = ref_px.gather_rows(&rep)?;
        let idx: Vec<usize> = (0..n)
            .flat_map(|q| {
                (0..heads).flat_map(move |m| {
                    (0..points).map(move |k| ((q * heads + m) * levels + l) * points + k)
                })
            })
            .collect();
        let off_rows = offsets.gather_rows(&idx)?;
        per_level.push(ref_rows.add(&off_rows)?);
    }
    Ok(per_level)
}

/// Deformable attention: each query attends to K sampled points per level
/// and head, with sampling offsets and attention weights predicted from the
/// query. The weights are normalized jointly over (level, point) per head.
pub struct MsDeformAttn {
    cfg: AttentionConfig,
    offset_head: Linear,
    logit_head: Linear,
    value_proj: Linear,
    out_proj: Linear,
}

impl MsDeformAttn {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut RngState,
        name: &str,
        cfg: AttentionConfig,
    ) -> MsDeformAttn {
        cfg.validate().expect("invalid attention config");
        let (m, l, k, c) = (cfg.heads, cfg.levels, cfg.points, cfg.width);
        // Start sampling on a small per-head circle around the reference and
        // leave weights zero so early training sees near-local attention.
        let mut offset_bias = Vec::with_capacity(m * l * k * 2);
        for mi in 0..m {
            let theta = 2.0 * PI * mi as f64 / m as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let norm = dx.abs().max(dy.abs()).max(1e-12);
            for _li in 0..l {
                for ki in 0..k {
                    offset_bias.push(dx / norm * (ki + 1) as f64);
                    offset_bias.push(dy / norm * (ki + 1) as f64);
                }
            }
        }
        MsDeformAttn {
            cfg,
            offset_head: Linear::zero_with_bias(ps, &format!("{name}.offset"), c, offset_bias),
            logit_head: Linear::zero_with_bias(ps, &format!("{name}.logit"), c, vec![0.0; m * l * k]),
            value_proj: Linear::new(ps, rng, &format!("{name}.value"), c, c, true),
            out_proj: Linear::new(ps, rng, &format!("{name}.out"), c, c, true),
        }
    }

    pub fn forward(
        &self,
        z_q: &Tensor,
        refs: &Tensor,
        feats: &MultiScaleFeatures,
    ) -> Result<Tensor> {
        let (out, _) = self.forward_detailed(z_q, refs, feats)?;
        Ok(out)
    }

    /// Also returns the attention weights [(N·M) × (L·K)] for inspection.
    pub fn forward_detailed(
        &self,
        z_q: &Tensor,
        refs: &Tensor,
        feats: &MultiScaleFeatures,
    ) -> Result<(Tensor, Tensor)> {
        let cfg = &self.cfg;
        let (m, l, k, c) = (cfg.heads, cfg.levels, cfg.points, cfg.width);
        let hw = cfg.head_width();
        let n = z_q.shape()[0];
        if feats.levels() != l {
            return Err(Error::contract(format!(
                "deformable attention: {} feature levels, config says {l}",
                feats.levels()
            )));
        }
        if feats.width() != c {
            return Err(Error::contract(format!(
                "deformable attention: feature width {} != model width {c}",
                feats.width()
            )));
        }

        let offsets = self.offset_head.forward(z_q)?.reshape(&[n * m * l * k, 2])?;
        let locs = compute_sampling_locations(refs, &offsets, m, l, k, feats.shapes())?;

        // Per level: project values once, then sample at (query, head, point)
        // rows. Levels are stacked so one index map can interleave them into
        // (query, head, level, point) order with the head's channel block.
        let mut sampled = Vec::with_capacity(l);
        for li in 0..l {
            let (h, w) = feats.shape(li);
            let vals = self.value_proj.forward(&feats.rows(li)?)?;
            sampled.push(Tensor::bilinear_rows(&vals, &locs[li], h, w)?);
        }
        let srefs: Vec<&Tensor> = sampled.iter().collect();
        let stacked = Tensor::concat_rows(&srefs)?;
        let nmk = n * m * k;
        let mut idx = Vec::with_capacity(n * m * l * k * hw);
        for q in 0..n {
            for mi in 0..m {
                for li in 0..l {
                    for ki in 0..k {
                        let src_row = li * nmk + (q * m + mi) * k + ki;
                        let base = (src_row * c + mi * hw) as i64;
                        for j in 0..hw {
                            idx.push(base + j as i64);
                        }
                    }
                }
            }
        }
        let values = stacked.gather_flat(Rc::new(idx), &[n * m * l * k, hw])?;

        let logits = self.logit_head.forward(z_q)?.reshape(&[n * m, l * k])?;
        let weights = logits.softmax(1)?;
        let heads_out = Tensor::weighted_sum_rows(&weights, &values)?;
        let out = self.out_proj.forward(&heads_out.reshape(&[n, c])?)?;
        Ok((out, weights))
    }
}

/// Fixed 2-D sine/cosine positional encoding as [(H·W)×C] rows; the first
/// half of the channels encodes y, the second half x. Values lie in [−1,1].
pub fn sine_positional_encoding(h: usize, w: usize, c: usize) -> Tensor {
    assert!(c % 2 == 0, "positional encoding needs even width");
    let half = c / 2;
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            let ye = (y as f64 + 0.5) / h as f64 * 2.0 * PI;
            let xe = (x as f64 + 0.5) / w as f64 * 2.0 * PI;
            for i in 0..half {
                let freq = 10000f64.powf(2.0 * ((i / 2) as f64) / half as f64);
                let (vy, vx) = (ye / freq, xe / freq);
                let (sy, sx) = if i % 2 == 0 {
                    (vy.sin(), vx.sin())
                } else {
                    (vy.cos(), vx.cos())
                };
                data[row * c + i] = sy;
                data[row * c + half + i] = sx;
            }
        }
    }
    Tensor::from_vec(data, &[h * w, c]).unwrap()
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

    fn rand_feats(rng: &mut RngState, c: usize) -> MultiScaleFeatures {
        MultiScaleFeatures::new(vec![
            Tensor::randn(rng, &[c, 4, 4], 1.0),
            Tensor::randn(rng, &[c, 2, 2], 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn config_rejects_indivisible_width() {
        let cfg = AttentionConfig {
            heads: 3,
            width: 8,
            levels: 1,
            points: 1,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn features_must_shrink() {
        let a = Tensor::zeros(&[4, 4, 4]);
        let b = Tensor::zeros(&[4, 4, 4]);
        assert!(MultiScaleFeatures::new(vec![a, b]).is_err());
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut rng = RngState::new(1);
        let mut ps = ParamSet::new();
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "a", 8, 2);
        let q = Tensor::randn(&mut rng, &[3, 8], 1.0);
        let kv = Tensor::randn(&mut rng, &[1, 8], 1.0);
        let (out, w) = mha.forward_detailed(&q, &kv, None, None).unwrap();
        for v in w.data() {
            assert!((v - 1.0).abs() < 1e-7);
        }
        // Every query sees the same single value row.
        let oracle = mha.wo.forward(&mha.wv.forward(&kv).unwrap()).unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert!((out.at2(r, c) - oracle.at2(0, c)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = RngState::new(2);
        let mut ps = ParamSet::new();
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "a", 8, 2);
        let q = Tensor::randn(&mut rng, &[2, 8], 1.0);
        let one = Tensor::randn(&mut rng, &[1, 8], 1.0);
        let kv = one.gather_rows(&[0, 0, 0, 0]).unwrap();
        let (_, w) = mha.forward_detailed(&q, &kv, None, None).unwrap();
        for v in w.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let _m = PrecisionGuard::new(Precision::F64);
        let mut rng = RngState::new(3);
        let mut ps = ParamSet::new();
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "a", 8, 2);
        let q = Tensor::randn(&mut rng, &[2, 8], 1.0);
        let kv = Tensor::randn(&mut rng, &[3, 8], 1.0);
        let qp = Tensor::randn(&mut rng, &[2, 8], 0.5);
        let kp = Tensor::randn(&mut rng, &[3, 8], 0.5);
        let out = mha.forward(&q, &kv, Some(&qp), Some(&kp)).unwrap();

        // Oracle: explicit per-head softmax(QKᵀ/√d)V then concat + project.
        let qm = mha.wq.forward(&q.add(&qp).unwrap()).unwrap();
        let km = mha.wk.forward(&kv.add(&kp).unwrap()).unwrap();
        let vm = mha.wv.forward(&kv).unwrap();
        let mut heads = Vec::new();
        for m in 0..2 {
            let mut head = vec![0.0; 2 * 4];
            for i in 0..2 {
                let mut logits = [0.0; 3];
                for (s, logit) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for j in 0..4 {
                        dot += qm.at2(i, m * 4 + j) * km.at2(s, m * 4 + j);
                    }
                    *logit = dot / 2.0;
                }
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
                for s in 0..3 {
                    let a = (logits[s] - mx).exp() / z;
                    for j in 0..4 {
                        head[i * 4 + j] += a * vm.at2(s, m * 4 + j);
                    }
                }
            }
            heads.push(Tensor::from_vec(head, &[2, 4]).unwrap());
        }
        let hrefs: Vec<&Tensor> = heads.iter().collect();
        let oracle = mha
            .wo
            .forward(&Tensor::concat_cols(&hrefs).unwrap())
            .unwrap();
        for i in 0..2 {
            for c in 0..8 {
                assert!((out.at2(i, c) - oracle.at2(i, c)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn empty_key_set_is_a_contract_error() {
        let mut rng = RngState::new(4);
        let mut ps = ParamSet::new();
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "a", 8, 2);
        let q = Tensor::randn(&mut rng, &[2, 8], 1.0);
        let kv = Tensor::zeros(&[0, 8]);
        assert!(mha.forward(&q, &kv, None, None).is_err());
    }

    #[test]
    fn sampling_location_convention() {
        // Center of a 4x4 map with no offset.
        let refs = Tensor::from_vec(vec![0.5, 0.5], &[1, 2]).unwrap();
        let offs = Tensor::zeros(&[1, 2]);
        let locs = compute_sampling_locations(&refs, &offs, 1, 1, 1, &[(4, 4)]).unwrap();
        assert_eq!(locs[0].data(), &[1.5, 1.5]);

        // Map corner lands half a texel outside.
        let refs = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        let locs = compute_sampling_locations(&refs, &Tensor::zeros(&[1, 2]), 1, 1, 1, &[(4, 4)])
            .unwrap();
        assert_eq!(locs[0].data(), &[-0.5, -0.5]);

        // Pixel-unit offset added after rescaling, 8x8 level.
        let refs = Tensor::from_vec(vec![0.25, 0.75], &[1, 2]).unwrap();
        let offs = Tensor::from_vec(vec![1.0, -2.0], &[1, 2]).unwrap();
        let locs = compute_sampling_locations(&refs, &offs, 1, 1, 1, &[(8, 8)]).unwrap();
        assert_eq!(locs[0].data(), &[2.5, 3.5]);
    }

    #[test]
    fn deform_attn_single_point_reduces_to_projected_lookup() {
        let _m = PrecisionGuard::new(Precision::F64);
        let mut rng = RngState::new(5);
        let mut ps = ParamSet::new();
        let cfg = AttentionConfig {
            heads: 1,
            width: 4,
            levels: 1,
            points: 1,
        };
        let attn = MsDeformAttn::new(&mut ps, &mut rng, "d", cfg);
        // Zero the offset bias too; the default init spreads points around
        // the reference.
        ps.get("d.offset.b").unwrap().set_value(vec![0.0, 0.0]);
        let feats = MultiScaleFeatures::new(vec![Tensor::randn(&mut rng, &[4, 4, 4], 1.0)]).unwrap();
        let z = Tensor::randn(&mut rng, &[2, 4], 1.0);
        let refs = Tensor::from_vec(vec![0.375, 0.625, 0.125, 0.125], &[2, 2]).unwrap();
        let out = attn.forward(&z, &refs, &feats).unwrap();

        // Reference (0.375, 0.625) on 4x4 → pixel (1.0, 2.0): texel (1,2).
        let pts = Tensor::from_vec(vec![0.375, 0.625, 0.125, 0.125], &[2, 2]).unwrap();
        let direct = Tensor::bilinear_sample(feats.map(0), &pts).unwrap();
        let oracle = attn
            .out_proj
            .forward(&attn.value_proj.forward(&direct).unwrap())
            .unwrap();
        for i in 0..2 {
            for c in 0..4 {
                assert!((out.at2(i, c) - oracle.at2(i, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deform_attn_weights_sum_to_one_per_head() {
        let mut rng = RngState::new(6);
        let mut ps = ParamSet::new();
        let attn = MsDeformAttn::new(&mut ps, &mut rng, "d", toy_cfg());
        // Give the logit head random weights so the softmax is nontrivial.
        let lw = ps.get("d.logit.w").unwrap();
        lw.set_value(Tensor::randn(&mut rng, lw.shape(), 0.5).to_vec());
        let feats = rand_feats(&mut rng, 8);
        let z = Tensor::randn(&mut rng, &[3, 8], 1.0);
        let refs = Tensor::rand_uniform(&mut rng, &[3, 2], 0.1, 0.9);
        let (_, w) = attn.forward_detailed(&z, &refs, &feats).unwrap();
        assert_eq!(w.shape(), &[6, 4]);
        for r in 0..6 {
            let s: f64 = (0..4).map(|c| w.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn deform_attn_matches_dense_enumeration() {
        let _m = PrecisionGuard::new(Precision::F64);
        let mut rng = RngState::new(7);
        let mut ps = ParamSet::new();
        // One head, one 4x4 level, 16 points pinned to every texel center.
        let cfg = AttentionConfig {
            heads: 1,
            width: 4,
            levels: 1,
            points: 16,
        };
        let attn = MsDeformAttn::new(&mut ps, &mut rng, "d", cfg);
        let anchor = [0.25f64, 0.25];
        let refx = anchor[0] * 4.0 - 0.5;
        let refy = anchor[1] * 4.0 - 0.5;
        let mut bias = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                bias.push(x as f64 - refx);
                bias.push(y as f64 - refy);
            }
        }
        ps.get("d.offset.b").unwrap().set_value(bias);
        let logit_bias: Vec<f64> = (0..16).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        ps.get("d.logit.b").unwrap().set_value(logit_bias.clone());

        let feats = MultiScaleFeatures::new(vec![Tensor::randn(&mut rng, &[4, 4, 4], 1.0)]).unwrap();
        let z = Tensor::randn(&mut rng, &[1, 4], 1.0);
        let refs = Tensor::from_vec(anchor.to_vec(), &[1, 2]).unwrap();
        let out = attn.forward(&z, &refs, &feats).unwrap();

        // Brute force: softmax weights over all 16 texels, dense sum of
        // projected values, then the output projection.
        let vals = attn.value_proj.forward(&feats.rows(0).unwrap()).unwrap();
        let mx = logit_bias.iter().cloned().fold(f64::MIN, f64::max);
        let zsum: f64 = logit_bias.iter().map(|v| (v - mx).exp()).sum();
        let mut mixed = vec![0.0; 4];
        for t in 0..16 {
            let a = (logit_bias[t] - mx).exp() / zsum;
            for c in 0..4 {
                mixed[c] += a * vals.at2(t, c);
            }
        }
        let oracle = attn
            .out_proj
            .forward(&Tensor::from_vec(mixed, &[1, 4]).unwrap())
            .unwrap();
        for c in 0..4 {
            assert!(
                (out.at2(0, c) - oracle.at2(0, c)).abs() < 1e-5,
                "channel {c}: {} vs {}",
                out.at2(0, c),
                oracle.at2(0, c)
            );
        }
    }

    #[test]
    fn deform_attn_invariant_to_point_enumeration_order() {
        let _m = PrecisionGuard::new(Precision::F64);
        let mut rng = RngState::new(8);
        let mut ps = ParamSet::new();
        let cfg = toy_cfg();
        let attn = MsDeformAttn::new(&mut ps, &mut rng, "d", cfg);
        let ob = ps.get("d.offset.b").unwrap();
        ob.set_value(Tensor::rand_uniform(&mut rng, ob.shape(), -1.5, 1.5).to_vec());
        let lb = ps.get("d.logit.b").unwrap();
        lb.set_value(Tensor::rand_uniform(&mut rng, lb.shape(), -1.0, 1.0).to_vec());
        let feats = rand_feats(&mut rng, 8);
        let z = Tensor::randn(&mut rng, &[2, 8], 1.0);
        let refs = Tensor::rand_uniform(&mut rng, &[2, 2], 0.2, 0.8);
        let before = attn.forward(&z, &refs, &feats).unwrap();

        // Swap the two points inside every (head, level) block of both the
        // offset and logit biases; the (l,k) sum must not care.
        let mut off = ob.value();
        let mut log = lb.value();
        for hm in 0..cfg.heads * cfg.levels {
            off.swap(hm * 4, hm * 4 + 2);
            off.swap(hm * 4 + 1, hm * 4 + 3);
            log.swap(hm * 2, hm * 2 + 1);
        }
        ob.set_value(off);
        lb.set_value(log);
        let after = attn.forward(&z, &refs, &feats).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn deform_attn_gradients_pass_finite_differences() {
        let mut rng = RngState::new(9);
        let z0 = Tensor::randn(&mut rng, &[2, 8], 1.0);
        let f0 = Tensor::randn(&mut rng, &[8, 4, 4], 1.0);
        let f1 = Tensor::randn(&mut rng, &[8, 2, 2], 1.0);
        let r0 = Tensor::rand_uniform(&mut rng, &[2, 2], 0.25, 0.75);
        let err = finite_diff_check_multi(
            |xs| {
                let mut ps = ParamSet::new();
                let mut r = RngState::new(21);
                let attn = MsDeformAttn::new(&mut ps, &mut r, "d", toy_cfg());
                let lw = ps.get("d.logit.w").unwrap();
                let mut lr = RngState::new(22);
                lw.set_value(Tensor::randn(&mut lr, lw.shape(), 0.3).to_vec());
                let feats = MultiScaleFeatures::new(vec![xs[1].clone(), xs[2].clone()])?;
                let out = attn.forward(&xs[0], &xs[3], &feats)?;
                Ok(out.mul(&out)?.mean())
            },
            &[z0, f0, f1, r0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "deformable attention grad err {err:.3e}");
    }

    #[test]
    fn positional_encoding_shape_range_and_determinism() {
        let pe = sine_positional_encoding(8, 8, 16);
        assert_eq!(pe.shape(), &[64, 16]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let pe2 = sine_positional_encoding(8, 8, 16);
        assert_eq!(pe.data(), pe2.data());
        // All 64 positions are pairwise distinct.
        for a in 0..64 {
            for b in a + 1..64 {
                let same = (0..16).all(|c| (pe.at2(a, c) - pe.at2(b, c)).abs() < 1e-12);
                assert!(!same, "positions {a} and {b} collide");
            }
        }
    }
}
