//! Finite-difference gradient verification.
//!
//! Central differences in 64-bit mode against the reverse-mode gradients.
//! The registry holds one deterministic case per differentiable op, with
//! inputs placed away from kinks so the numeric derivative is trustworthy.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::precision::{Precision, PrecisionGuard};
use super::rng::RngState;
use super::tape::with_fresh_tape;
use super::Tensor;

const EPS: f64 = 1e-5;

type CaseFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Max relative gradient error of a scalar-valued function of one tensor.
pub fn finite_diff_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    finite_diff_check_multi(|xs| f(&xs[0]), std::slice::from_ref(x), eps)
}

/// Max relative gradient error of a scalar-valued function of several
/// tensors. All inputs are treated as differentiable.
pub fn finite_diff_check_multi(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    xs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    finite_diff_report(&f, xs, eps, 1.0)
}

/// As above, with the analytic gradient scaled by `grad_scale` before the
/// comparison. A scale of 1.0 checks the real gradient; any other value
/// simulates a broken backward pass and must make the check fail.
pub fn finite_diff_report(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    xs: &[Tensor],
    eps: f64,
    grad_scale: f64,
) -> Result<f64> {
    let _mode = PrecisionGuard::new(Precision::F64);
    let analytic: Vec<Vec<f64>> = with_fresh_tape(|| -> Result<Vec<Vec<f64>>> {
        let tracked: Vec<Tensor> = xs.iter().map(|x| x.clone().requires_grad()).collect();
        let y = f(&tracked)?;
        if y.numel() != 1 {
            return Err(Error::contract(format!(
                "finite_diff: function must return a scalar, got shape {:?}",
                y.shape()
            )));
        }
        y.backward()?;
        tracked
            .iter()
            .map(|x| {
                Ok(match x.grad()? {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; x.numel()],
                })
            })
            .collect()
    })?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        with_fresh_tape(|| f(inputs)?.item())
    };

    let mut max_rel = 0.0f64;
    for (k, x) in xs.iter().enumerate() {
        let base = x.to_vec();
        for i in 0..base.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                let mut inputs = xs.to_vec();
                inputs[k] = Tensor::from_vec(v, x.shape())?;
                eval(&inputs)
            };
            let fp = probe(eps)?;
            let fm = probe(-eps)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k][i] * grad_scale;
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / scale);
        }
    }
    Ok(max_rel)
}

/// A named, seeded gradient check covering one op.
pub struct GradCheckCase {
    pub name: &'static str,
    builder: fn(&mut RngState) -> Result<(Vec<Tensor>, CaseFn)>,
}

impl GradCheckCase {
    /// Runs the case. `grad_scale` other than 1.0 corrupts the analytic
    /// gradient so callers can confirm the check has teeth.
    pub fn run(&self, seed: u64, grad_scale: f64) -> Result<f64> {
        let _mode = PrecisionGuard::new(Precision::F64);
        let mut rng = RngState::new(seed).derive(fnv1a(self.name));
        let (xs, f) = (self.builder)(&mut rng)?;
        finite_diff_report(&*f, &xs, EPS, grad_scale)
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Reduce a non-scalar output against fixed random weights so every output
/// element influences the objective differently.
fn dot_probe(rng: &mut RngState, shape: &[usize]) -> Tensor {
    Tensor::rand_uniform(rng, shape, 0.25, 1.75)
}

/// Values guaranteed at least `margin` away from every point in `kinks`.
fn away_from(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = rng.uniform_in(lo, hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            data.push(v);
        }
    }
    Tensor::from_vec(data, shape).unwrap()
}

macro_rules! case {
    ($vec:ident, $name:literal, $builder:expr) => {
        $vec.push(GradCheckCase {
            name: $name,
            builder: $builder,
        });
    };
}

/// All registered per-op gradient checks.
pub fn registered_ops() -> Vec<GradCheckCase> {
    let mut v: Vec<GradCheckCase> = Vec::new();

    case!(v, "add", |rng| {
        let a = Tensor::randn(rng, &[3, 4], 1.0);
        let b = Tensor::randn(rng, &[3, 4], 1.0);
        let w = dot_probe(rng, &[3, 4]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].add(&xs[1])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "sub", |rng| {
        let a = Tensor::randn(rng, &[2, 5], 1.0);
        let b = Tensor::randn(rng, &[2, 5], 1.0);
        let w = dot_probe(rng, &[2, 5]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].sub(&xs[1])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "mul", |rng| {
        let a = Tensor::randn(rng, &[4, 3], 1.0);
        let b = Tensor::randn(rng, &[4, 3], 1.0);
        let w = dot_probe(rng, &[4, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].mul(&xs[1])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "div", |rng| {
        let a = Tensor::randn(rng, &[3, 3], 1.0);
        let b = Tensor::rand_uniform(rng, &[3, 3], 0.5, 2.0);
        let w = dot_probe(rng, &[3, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].div(&xs[1])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "add_scalar", |rng| {
        let a = Tensor::randn(rng, &[6], 1.0);
        let w = dot_probe(rng, &[6]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].add_scalar(0.7).mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "mul_scalar", |rng| {
        let a = Tensor::randn(rng, &[6], 1.0);
        let w = dot_probe(rng, &[6]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].mul_scalar(-1.3).mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "neg", |rng| {
        let a = Tensor::randn(rng, &[5], 1.0);
        let w = dot_probe(rng, &[5]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].neg().mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "relu", |rng| {
        let a = away_from(rng, &[4, 4], -2.0, 2.0, &[0.0], 1e-2);
        let w = dot_probe(rng, &[4, 4]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].relu().mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "sigmoid", |rng| {
        let a = Tensor::randn(rng, &[3, 4], 2.0);
        let w = dot_probe(rng, &[3, 4]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].sigmoid().mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "exp", |rng| {
        let a = Tensor::rand_uniform(rng, &[3, 3], -1.5, 1.5);
        let w = dot_probe(rng, &[3, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].exp().mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "ln", |rng| {
        let a = Tensor::rand_uniform(rng, &[3, 3], 0.2, 3.0);
        let w = dot_probe(rng, &[3, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].ln().mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "sqrt", |rng| {
        let a = Tensor::rand_uniform(rng, &[3, 3], 0.1, 4.0);
        let w = dot_probe(rng, &[3, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].sqrt().mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "abs", |rng| {
        let a = away_from(rng, &[4, 4], -2.0, 2.0, &[0.0], 1e-2);
        let w = dot_probe(rng, &[4, 4]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].abs().mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "clamp", |rng| {
        let a = away_from(rng, &[5, 3], -2.0, 2.0, &[-0.75, 0.8], 1e-2);
        let w = dot_probe(rng, &[5, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].clamp(-0.75, 0.8).mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "pow_scalar", |rng| {
        let a = Tensor::rand_uniform(rng, &[3, 4], 0.2, 2.0);
        let w = dot_probe(rng, &[3, 4]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].pow_scalar(1.7).mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "maximum", |rng| {
        let (a, b) = gapped_pair(rng, &[4, 3]);
        let w = dot_probe(rng, &[4, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].maximum(&xs[1])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "minimum", |rng| {
        let (a, b) = gapped_pair(rng, &[4, 3]);
        let w = dot_probe(rng, &[4, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].minimum(&xs[1])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "matmul", |rng| {
        let a = Tensor::randn(rng, &[3, 4], 1.0);
        let b = Tensor::randn(rng, &[4, 2], 1.0);
        let w = dot_probe(rng, &[3, 2]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].matmul(&xs[1])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "transpose", |rng| {
        let a = Tensor::randn(rng, &[3, 5], 1.0);
        let w = dot_probe(rng, &[5, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].transpose()?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "reshape", |rng| {
        let a = Tensor::randn(rng, &[2, 6], 1.0);
        let w = dot_probe(rng, &[3, 4]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].reshape(&[3, 4])?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "sum", |rng| {
        let a = Tensor::randn(rng, &[3, 4], 1.0);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].sum()));
        Ok((vec![a], f))
    });

    case!(v, "mean", |rng| {
        let a = Tensor::randn(rng, &[7], 1.0);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].mean()));
        Ok((vec![a], f))
    });

    case!(v, "col_sums", |rng| {
        let a = Tensor::randn(rng, &[4, 3], 1.0);
        let w = dot_probe(rng, &[1, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].col_sums()?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "softmax", |rng| {
        let a = Tensor::randn(rng, &[2, 3, 4], 1.5);
        let w = dot_probe(rng, &[2, 3, 4]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].softmax(1)?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "layer_norm", |rng| {
        let x = Tensor::randn(rng, &[3, 6], 1.0);
        let g = Tensor::rand_uniform(rng, &[6], 0.5, 1.5);
        let b = Tensor::randn(rng, &[6], 0.3);
        let w = dot_probe(rng, &[3, 6]);
        let f: CaseFn =
            Box::new(move |xs| Ok(xs[0].layer_norm(&xs[1], &xs[2], 1e-5)?.mul(&w)?.sum()));
        Ok((vec![x, g, b], f))
    });

    case!(v, "l2_normalize_rows", |rng| {
        let a = away_from(rng, &[3, 5], -2.0, 2.0, &[0.0], 0.1);
        let w = dot_probe(rng, &[3, 5]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].l2_normalize_rows()?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "concat_rows", |rng| {
        let a = Tensor::randn(rng, &[2, 3], 1.0);
        let b = Tensor::randn(rng, &[3, 3], 1.0);
        let w = dot_probe(rng, &[5, 3]);
        let f: CaseFn =
            Box::new(move |xs| Ok(Tensor::concat_rows(&[&xs[0], &xs[1]])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "concat_cols", |rng| {
        let a = Tensor::randn(rng, &[3, 2], 1.0);
        let b = Tensor::randn(rng, &[3, 4], 1.0);
        let w = dot_probe(rng, &[3, 6]);
        let f: CaseFn =
            Box::new(move |xs| Ok(Tensor::concat_cols(&[&xs[0], &xs[1]])?.mul(&w)?.sum()));
        Ok((vec![a, b], f))
    });

    case!(v, "slice_rows", |rng| {
        let a = Tensor::randn(rng, &[5, 3], 1.0);
        let w = dot_probe(rng, &[2, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].slice_rows(1, 2)?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "slice_cols", |rng| {
        let a = Tensor::randn(rng, &[3, 6], 1.0);
        let w = dot_probe(rng, &[3, 2]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].slice_cols(2, 2)?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "gather_rows", |rng| {
        let a = Tensor::randn(rng, &[4, 3], 1.0);
        let w = dot_probe(rng, &[5, 3]);
        let f: CaseFn =
            Box::new(move |xs| Ok(xs[0].gather_rows(&[2, 0, 2, 3, 1])?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "gather_flat", |rng| {
        let a = Tensor::randn(rng, &[3, 4], 1.0);
        let idx: Rc<Vec<i64>> = Rc::new(vec![0, 5, -1, 11, 3, 3, -1, 8]);
        let w = dot_probe(rng, &[2, 4]);
        let f: CaseFn =
            Box::new(move |xs| Ok(xs[0].gather_flat(idx.clone(), &[2, 4])?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "add_row_broadcast", |rng| {
        let a = Tensor::randn(rng, &[4, 3], 1.0);
        let r = Tensor::randn(rng, &[3], 1.0);
        let w = dot_probe(rng, &[4, 3]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].add_row_broadcast(&xs[1])?.mul(&w)?.sum()));
        Ok((vec![a, r], f))
    });

    case!(v, "col_affine", |rng| {
        let a = Tensor::randn(rng, &[4, 2], 1.0);
        let w = dot_probe(rng, &[4, 2]);
        let f: CaseFn =
            Box::new(move |xs| Ok(xs[0].col_affine(&[3.0, -2.0], &[0.5, 1.0])?.mul(&w)?.sum()));
        Ok((vec![a], f))
    });

    case!(v, "bilinear_rows", |rng| {
        let vals = Tensor::randn(rng, &[12, 2], 1.0);
        // Fractional offsets keep each probe inside one bilinear cell; one
        // point lies fully outside the 4x3 map.
        let pts = Tensor::from_vec(
            vec![0.3, 0.4, 2.6, 1.45, 1.25, 0.7, -2.5, 1.3, 0.55, 1.6],
            &[5, 2],
        )?;
        let w = dot_probe(rng, &[5, 2]);
        let f: CaseFn =
            Box::new(move |xs| Ok(Tensor::bilinear_rows(&xs[0], &xs[1], 3, 4)?.mul(&w)?.sum()));
        Ok((vec![vals, pts], f))
    });

    case!(v, "bilinear_sample", |rng| {
        let feat = Tensor::randn(rng, &[2, 3, 4], 1.0);
        let pts = Tensor::from_vec(vec![0.31, 0.42, 0.69, 0.58, 0.21, 0.87], &[3, 2])?;
        let w = dot_probe(rng, &[3, 2]);
        let f: CaseFn =
            Box::new(move |xs| Ok(Tensor::bilinear_sample(&xs[0], &xs[1])?.mul(&w)?.sum()));
        Ok((vec![feat, pts], f))
    });

    case!(v, "bce_with_logits", |rng| {
        let z = Tensor::randn(rng, &[3, 4], 1.5);
        let mut t = Vec::new();
        for _ in 0..12 {
            t.push(if rng.uniform() < 0.5 { 0.0 } else { 1.0 });
        }
        let targets = Tensor::from_vec(t, &[3, 4])?;
        let w = dot_probe(rng, &[3, 4]);
        let f: CaseFn = Box::new(move |xs| Ok(xs[0].bce_with_logits(&targets)?.mul(&w)?.sum()));
        Ok((vec![z], f))
    });

    case!(v, "cross_entropy_rows", |rng| {
        let z = Tensor::randn(rng, &[4, 5], 1.5);
        let targets = vec![rng.below(5), rng.below(5), rng.below(5), rng.below(5)];
        let w = dot_probe(rng, &[4, 1]);
        let f: CaseFn =
            Box::new(move |xs| Ok(xs[0].cross_entropy_rows(&targets)?.mul(&w)?.sum()));
        Ok((vec![z], f))
    });

    case!(v, "weighted_sum_rows", |rng| {
        let wgt = Tensor::randn(rng, &[3, 4], 1.0);
        let vals = Tensor::randn(rng, &[12, 2], 1.0);
        let w = dot_probe(rng, &[3, 2]);
        let f: CaseFn =
            Box::new(move |xs| Ok(Tensor::weighted_sum_rows(&xs[0], &xs[1])?.mul(&w)?.sum()));
        Ok((vec![wgt, vals], f))
    });

    case!(v, "composite_chain", |rng| {
        // matmul -> broadcast bias -> sigmoid -> layer_norm -> softmax -> nll
        let x = Tensor::randn(rng, &[3, 4], 1.0);
        let w1 = Tensor::randn(rng, &[4, 5], 0.7);
        let b1 = Tensor::randn(rng, &[5], 0.3);
        let g = Tensor::rand_uniform(rng, &[5], 0.8, 1.2);
        let b2 = Tensor::randn(rng, &[5], 0.1);
        let targets = vec![rng.below(5), rng.below(5), rng.below(5)];
        let f: CaseFn = Box::new(move |xs| {
            let h = xs[0].matmul(&xs[1])?.add_row_broadcast(&xs[2])?.sigmoid();
            let n = h.layer_norm(&xs[3], &xs[4], 1e-5)?;
            Ok(n.cross_entropy_rows(&targets)?.mean())
        });
        Ok((vec![x, w1, b1, g, b2], f))
    });

    v
}

fn gapped_pair(rng: &mut RngState, shape: &[usize]) -> (Tensor, Tensor) {
    let n: usize = shape.iter().product();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_in(-1.0, 1.0);
        let gap = rng.uniform_in(0.05, 0.5) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        a.push(x);
        b.push(x + gap);
    }
    (
        Tensor::from_vec(a, shape).unwrap(),
        Tensor::from_vec(b, shape).unwrap(),
    )
}
