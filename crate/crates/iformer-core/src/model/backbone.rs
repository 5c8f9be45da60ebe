//! Small convolutional stem producing a multi-scale feature pyramid from an
//! RGB frame: three stride-2 stages to 1/8 resolution, one extra stride-2
//! stage per additional level, and a 1x1 projection to model width per level.

use crate::attention::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::tensor::{RngState, Tensor};

const STEM_WIDTHS: [usize; 3] = [16, 32, 64];

pub struct Backbone {
    stem: Vec<Conv2d>,
    extra: Vec<Conv2d>,
    proj: Vec<Conv2d>,
    levels: usize,
}

impl Backbone {
    pub fn new(ps: &mut ParamSet, rng: &mut RngState, name: &str, width: usize, levels: usize) -> Backbone {
        assert!(levels >= 1, "backbone needs at least one level");
        let mut stem = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in STEM_WIDTHS.iter().enumerate() {
            stem.push(Conv2d::new(ps, rng, &format!("{name}.stem{i}"), in_ch, out_ch, 3, 2, 1));
            in_ch = out_ch;
        }
        let base = *STEM_WIDTHS.last().unwrap();
        let extra = (1..levels)
            .map(|l| Conv2d::new(ps, rng, &format!("{name}.down{l}"), base, base, 3, 2, 1))
            .collect();
        let proj = (0..levels)
            .map(|l| Conv2d::new(ps, rng, &format!("{name}.proj{l}"), base, width, 1, 1, 0))
            .collect();
        Backbone {
            stem,
            extra,
            proj,
            levels,
        }
    }

    /// Finest stride of the pyramid; the canvas must divide by the coarsest,
    /// `8 << (levels-1)`.
    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels).map(|l| 8 << l).collect()
    }

    pub fn forward(&self, frame: &Tensor) -> Result<MultiScaleFeatures> {
        let (h, w) = match frame.shape() {
            [3, h, w] => (*h, *w),
            s => {
                return Err(Error::contract(format!(
                    "backbone input must be [3\u{d7}H\u{d7}W], got {s:?}"
                )))
            }
        };
        let coarsest = 8 << (self.levels - 1);
        if h % coarsest != 0 || w % coarsest != 0 {
            return Err(Error::contract(format!(
                "canvas {h}\u{d7}{w} must divide by the coarsest stride {coarsest}"
            )));
        }
        let mut x = frame.clone();
        for conv in &self.stem {
            x = conv.forward(&x)?.relu();
        }
        let mut maps = Vec::with_capacity(self.levels);
        maps.push(self.proj[0].forward(&x)?);
        for (l, conv) in self.extra.iter().enumerate() {
            x = conv.forward(&x)?.relu();
            maps.push(self.proj[l + 1].forward(&x)?);
        }
        MultiScaleFeatures::new(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(width: usize, levels: usize, seed: u64) -> (ParamSet, Backbone) {
        let mut ps = ParamSet::new();
        let mut rng = RngState::new(seed);
        let bb = Backbone::new(&mut ps, &mut rng, "bb", width, levels);
        (ps, bb)
    }

    #[test]
    fn pyramid_shapes_follow_the_strides() {
        let (_ps, bb) = build(32, 2, 51);
        let frame = Tensor::zeros(&[3, 64, 64]);
        let feats = bb.forward(&frame).unwrap();
        assert_eq!(feats.levels(), 2);
        assert_eq!(feats.width(), 32);
        assert_eq!(feats.shape(0), (8, 8));
        assert_eq!(feats.shape(1), (4, 4));
        assert_eq!(bb.strides(), vec![8, 16]);
    }

    #[test]
    fn rejects_bad_divisibility() {
        let (_ps, bb) = build(16, 2, 52);
        let err = bb.forward(&Tensor::zeros(&[3, 60, 64])).unwrap_err();
        assert!(err.to_string().contains("divide"), "got: {err}");
    }

    #[test]
    fn zero_image_gives_bias_only_constant_maps() {
        let (_ps, bb) = build(16, 2, 53);
        let feats = bb.forward(&Tensor::zeros(&[3, 32, 32])).unwrap();
        for l in 0..2 {
            let m = feats.map(l);
            let (h, w) = feats.shape(l);
            // Every texel of one channel holds the same bias-derived value.
            for c in 0..16 {
                let plane = &m.data()[c * h * w..(c + 1) * h * w];
                for v in plane {
                    assert_eq!(*v, plane[0]);
                }
            }
        }
    }

    #[test]
    fn identical_frames_give_identical_features() {
        let (_ps, bb) = build(16, 2, 54);
        let mut rng = RngState::new(55);
        let frame = Tensor::rand_uniform(&mut rng, &[3, 32, 32], 0.0, 1.0);
        let a = bb.forward(&frame).unwrap();
        let b = bb.forward(&frame).unwrap();
        for l in 0..2 {
            assert_eq!(a.map(l).data(), b.map(l).data());
        }
    }
}
