//! Trainable layers and the parameter registry.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{
    precision, ArchiveReader, ArchiveWriter, Dtype, Param, Precision, RngState, Tensor, TensorData,
};

/// Ordered collection of named parameters. Registration order is the
/// checkpoint record order, so saves are deterministic.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) -> Param {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name:?}"
        );
        let p = Param::new(name.clone(), data, shape);
        self.by_name.insert(name, self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Write every parameter into an open archive, in registration order.
    pub fn save_into(&self, w: &mut ArchiveWriter) -> Result<()> {
        let dtype = match precision() {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        };
        for p in &self.params {
            let t = TensorData::from_f64(p.shape().to_vec(), &p.value(), dtype)?;
            w.put(&p.name(), &t)?;
        }
        Ok(())
    }

    /// Restore every parameter from an archive. Shapes must match; records
    /// not belonging to this set are ignored (optimizer state lives beside
    /// the weights).
    pub fn load_from(&self, r: &ArchiveReader) -> Result<()> {
        for p in &self.params {
            let name = p.name();
            let t = r
                .get(&name)
                .map_err(|_| Error::config(format!("checkpoint is missing parameter {name:?}")))?;
            if t.shape() != p.shape() {
                return Err(Error::config(format!(
                    "checkpoint parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.set_value(t.f64_vec());
        }
        Ok(())
    }
}

fn xavier_uniform(rng: &mut RngState, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform_in(-a, a)).collect()
}

/// Affine map `x·W + b` with `W` stored [in×out].
pub struct Linear {
    w: Param,
    b: Option<Param>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut RngState,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Linear {
        let w = ps.register(
            format!("{name}.w"),
            xavier_uniform(rng, in_dim, out_dim, in_dim * out_dim),
            vec![in_dim, out_dim],
        );
        let b = bias.then(|| ps.register(format!("{name}.b"), vec![0.0; out_dim], vec![out_dim]));
        Linear { w, b }
    }

    /// Zero weights and fixed bias values: the init used by sampling-offset
    /// heads so early attention stays near the reference point.
    pub fn zero_with_bias(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        bias: Vec<f64>,
    ) -> Linear {
        let out_dim = bias.len();
        let w = ps.register(
            format!("{name}.w"),
            vec![0.0; in_dim * out_dim],
            vec![in_dim, out_dim],
        );
        let b = Some(ps.register(format!("{name}.b"), bias, vec![out_dim]));
        Linear { w, b }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w.tensor())?;
        match &self.b {
            Some(b) => y.add_row_broadcast(&b.tensor()),
            None => Ok(y),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn weight(&self) -> &Param {
        &self.w
    }

    pub fn bias(&self) -> Option<&Param> {
        self.b.as_ref()
    }
}

/// Row-wise layer normalization with learned scale and shift.
pub struct LayerNorm {
    g: Param,
    b: Param,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            g: ps.register(format!("{name}.g"), vec![1.0; dim], vec![dim]),
            b: ps.register(format!("{name}.b"), vec![0.0; dim], vec![dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.g.tensor(), &self.b.tensor(), self.eps)
    }
}

/// Stack of affine maps with ReLU between (none after the last).
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, rng: &mut RngState, name: &str, dims: &[usize]) -> Mlp {
        assert!(dims.len() >= 2, "mlp needs at least in/out dims");
        let layers = (0..dims.len() - 1)
            .map(|i| {
                Linear::new(
                    ps,
                    rng,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                    true,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// 2-D convolution over a single [C×H×W] image, built from an indexed
/// patch gather and one matmul. Stride and zero padding are per-layer.
pub struct Conv2d {
    w: Param,
    b: Param,
    in_ch: usize,
    out_ch: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    index_cache: RefCell<HashMap<(usize, usize), Rc<Vec<i64>>>>,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut RngState,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        let fan_in = in_ch * ksize * ksize;
        let w = ps.register(
            format!("{name}.w"),
            xavier_uniform(rng, fan_in, out_ch, fan_in * out_ch),
            vec![fan_in, out_ch],
        );
        let b = ps.register(format!("{name}.b"), vec![0.0; out_ch], vec![out_ch]);
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            ksize,
            stride,
            pad,
            index_cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.ksize) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.ksize) / self.stride + 1;
        (oh, ow)
    }

    fn patch_indices(&self, h: usize, w: usize) -> Rc<Vec<i64>> {
        if let Some(idx) = self.index_cache.borrow().get(&(h, w)) {
            return idx.clone();
        }
        let (oh, ow) = self.out_size(h, w);
        let k = self.ksize;
        let mut idx = Vec::with_capacity(oh * ow * self.in_ch * k * k);
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..self.in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                            let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                            idx.push(if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                -1
                            } else {
                                (ci * h * w) as i64 + iy * w as i64 + ix
                            });
                        }
                    }
                }
            }
        }
        let idx = Rc::new(idx);
        self.index_cache.borrow_mut().insert((h, w), idx.clone());
        idx
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = match x.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::contract(format!(
                    "conv2d: input must be [C×H×W], got {s:?}"
                )))
            }
        };
        if c != self.in_ch {
            return Err(Error::contract(format!(
                "conv2d: {c} input channels, layer expects {}",
                self.in_ch
            )));
        }
        let (oh, ow) = self.out_size(h, w);
        let patch = self.in_ch * self.ksize * self.ksize;
        let cols = x.gather_flat(self.patch_indices(h, w), &[oh * ow, patch])?;
        let rows = cols
            .matmul(&self.w.tensor())?
            .add_row_broadcast(&self.b.tensor())?;
        rows.transpose()?.reshape(&[self.out_ch, oh, ow])
    }
}

/// Adam with decoupled weight decay. Moment buffers follow the parameter
/// set's registration order; `step` consumes and clears accumulated
/// gradients.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(ps: &ParamSet, lr: f64, weight_decay: f64) -> AdamW {
        let m = ps.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = ps.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update from the gradients accumulated in `ps`, then zero
    /// them. Parameters without a gradient are only decayed.
    pub fn step(&mut self, ps: &ParamSet) {
        assert_eq!(ps.len(), self.m.len(), "optimizer built for a different parameter set");
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, p) in ps.iter().enumerate() {
            let g = match p.grad() {
                Some(g) => g,
                None => {
                    if self.weight_decay > 0.0 {
                        let f = 1.0 - self.lr * self.weight_decay;
                        p.update(|d| d.iter_mut().for_each(|x| *x *= f));
                    }
                    continue;
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.update(|d| {
                for j in 0..d.len() {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    d[j] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * d[j]);
                }
            });
            p.zero_grad();
        }
    }
}
