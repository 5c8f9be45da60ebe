//! Differentiable operations.
//!
//! Each op computes its forward value, then (only when an input is tracked)
//! records a backward closure that routes the output gradient to its parents.
//! Closures capture input/output buffers by `Rc`, never the tape itself.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::precision::quantize;
use super::tape::{self, BackFn, PassGrads};
use super::Tensor;

fn make(data: Vec<f64>, shape: Vec<usize>, back: Option<BackFn>) -> Tensor {
    let mut data = data;
    quantize(&mut data);
    let rc = Rc::new(data);
    let node = back.map(|b| tape::record(rc.len(), b, None));
    Tensor::from_parts(rc, shape, node)
}

/// Like [`make`] but the backward closure needs the (quantized) output buffer.
fn make_with_out(
    data: Vec<f64>,
    shape: Vec<usize>,
    back: impl FnOnce(Rc<Vec<f64>>) -> Option<BackFn>,
) -> Tensor {
    let mut data = data;
    quantize(&mut data);
    let rc = Rc::new(data);
    let node = back(rc.clone()).map(|b| tape::record(rc.len(), b, None));
    Tensor::from_parts(rc, shape, node)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::contract(format!(
            "{op}: expected 2-D tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (b, v) in buf.iter_mut().zip(g) {
        *b += v;
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

/// c[m×n] += a[m×p] · b[p×n]
pub(crate) fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let crow = &mut c[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// c[m×p] += a[m×n] · b[p×n]ᵀ
fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * p..(i + 1) * p];
        for k in 0..p {
            let brow = &b[k * n..(k + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            crow[k] += s;
        }
    }
}

/// c[p×n] += a[m×p]ᵀ · b[m×n]
fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let brow = &b[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[k * n..(k + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

// ── elementwise ─────────────────────────────────────────────────────

macro_rules! binary_elementwise {
    ($name:ident, $op_str:literal, $fwd:expr, $back_a:expr, $back_b:expr) => {
        pub fn $name(&self, rhs: &Tensor) -> Result<Tensor> {
            same_shape($op_str, self, rhs)?;
            let a = self.data_rc();
            let b = rhs.data_rc();
            let fwd = $fwd;
            let data: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &y)| fwd(x, y)).collect();
            let (ida, idb) = (self.live_id($op_str), rhs.live_id($op_str));
            let back: Option<BackFn> = if ida.is_some() || idb.is_some() {
                Some(Box::new(move |g: &[f64], pg: &mut PassGrads| {
                    if let Some(ia) = ida {
                        let buf = pg.buf(ia);
                        let da = $back_a;
                        for i in 0..g.len() {
                            buf[i] += g[i] * da(a[i], b[i]);
                        }
                    }
                    if let Some(ib) = idb {
                        let buf = pg.buf(ib);
                        let db = $back_b;
                        for i in 0..g.len() {
                            buf[i] += g[i] * db(a[i], b[i]);
                        }
                    }
                }))
            } else {
                None
            };
            Ok(make(data, self.shape().to_vec(), back))
        }
    };
}

macro_rules! unary_from_input {
    ($name:ident, $op_str:literal, $fwd:expr, $dfdx:expr) => {
        pub fn $name(&self) -> Tensor {
            let x = self.data_rc();
            let fwd = $fwd;
            let data: Vec<f64> = x.iter().map(|&v| fwd(v)).collect();
            let back: Option<BackFn> = self.live_id($op_str).map(|id| {
                Box::new(move |g: &[f64], pg: &mut PassGrads| {
                    let buf = pg.buf(id);
                    let d = $dfdx;
                    for i in 0..g.len() {
                        buf[i] += g[i] * d(x[i]);
                    }
                }) as BackFn
            });
            make(data, self.shape().to_vec(), back)
        }
    };
}

impl Tensor {
    binary_elementwise!(add, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0);
    binary_elementwise!(sub, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0);
    binary_elementwise!(mul, "mul", |x, y| x * y, |_, y| y, |x, _| x);
    binary_elementwise!(div, "div", |x, y| x / y, |_, y| 1.0 / y, |x: f64, y: f64| -x / (y * y));
    binary_elementwise!(
        maximum,
        "maximum",
        |x: f64, y: f64| x.max(y),
        |x, y| if x >= y { 1.0 } else { 0.0 },
        |x, y| if x >= y { 0.0 } else { 1.0 }
    );
    binary_elementwise!(
        minimum,
        "minimum",
        |x: f64, y: f64| x.min(y),
        |x, y| if x <= y { 1.0 } else { 0.0 },
        |x, y| if x <= y { 0.0 } else { 1.0 }
    );

    unary_from_input!(neg, "neg", |v: f64| -v, |_| -1.0);
    unary_from_input!(
        relu,
        "relu",
        |v: f64| v.max(0.0),
        |v| if v > 0.0 { 1.0 } else { 0.0 }
    );
    unary_from_input!(ln, "ln", |v: f64| v.ln(), |v| 1.0 / v);
    unary_from_input!(
        abs,
        "abs",
        |v: f64| v.abs(),
        |v: f64| if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    );

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v + c).collect();
        let back: Option<BackFn> = self.live_id("add_scalar").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| add_into(pg.buf(id), g)) as BackFn
        });
        make(data, self.shape().to_vec(), back)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v * c).collect();
        let back: Option<BackFn> = self.live_id("mul_scalar").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for i in 0..g.len() {
                    buf[i] += g[i] * c;
                }
            }) as BackFn
        });
        make(data, self.shape().to_vec(), back)
    }

    /// Logistic function; outputs in (0, 1).
    pub fn sigmoid(&self) -> Tensor {
        let x = self.data_rc();
        let data: Vec<f64> = x.iter().map(|&v| sigmoid_scalar(v)).collect();
        make_with_out(data, self.shape().to_vec(), |out| {
            self.live_id("sigmoid").map(|id| {
                Box::new(move |g: &[f64], pg: &mut PassGrads| {
                    let buf = pg.buf(id);
                    for i in 0..g.len() {
                        buf[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }) as BackFn
            })
        })
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v.exp()).collect();
        make_with_out(data, self.shape().to_vec(), |out| {
            self.live_id("exp").map(|id| {
                Box::new(move |g: &[f64], pg: &mut PassGrads| {
                    let buf = pg.buf(id);
                    for i in 0..g.len() {
                        buf[i] += g[i] * out[i];
                    }
                }) as BackFn
            })
        })
    }

    pub fn sqrt(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v.sqrt()).collect();
        make_with_out(data, self.shape().to_vec(), |out| {
            self.live_id("sqrt").map(|id| {
                Box::new(move |g: &[f64], pg: &mut PassGrads| {
                    let buf = pg.buf(id);
                    for i in 0..g.len() {
                        buf[i] += g[i] / (2.0 * out[i]);
                    }
                }) as BackFn
            })
        })
    }

    /// Elementwise x^p. Gradient passes where the base is positive.
    pub fn pow_scalar(&self, p: f64) -> Tensor {
        let x = self.data_rc();
        let data: Vec<f64> = x.iter().map(|&v| v.powf(p)).collect();
        let back: Option<BackFn> = self.live_id("pow_scalar").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for i in 0..g.len() {
                    let d = if x[i] > 0.0 { p * x[i].powf(p - 1.0) } else { 0.0 };
                    buf[i] += g[i] * d;
                }
            }) as BackFn
        });
        make(data, self.shape().to_vec(), back)
    }

    /// Clamp to [lo, hi]; gradient passes strictly inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let x = self.data_rc();
        let data: Vec<f64> = x.iter().map(|&v| v.clamp(lo, hi)).collect();
        let back: Option<BackFn> = self.live_id("clamp").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for i in 0..g.len() {
                    if x[i] > lo && x[i] < hi {
                        buf[i] += g[i];
                    }
                }
            }) as BackFn
        });
        make(data, self.shape().to_vec(), back)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, p) = dims2("matmul", self)?;
        let (p2, n) = dims2("matmul", rhs)?;
        if p != p2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let a = self.data_rc();
        let b = rhs.data_rc();
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, &a, &b, m, p, n);
        let (ida, idb) = (self.live_id("matmul"), rhs.live_id("matmul"));
        let back: Option<BackFn> = if ida.is_some() || idb.is_some() {
            Some(Box::new(move |g: &[f64], pg: &mut PassGrads| {
                if let Some(ia) = ida {
                    matmul_nt_acc(pg.buf(ia), g, &b, m, n, p);
                }
                if let Some(ib) = idb {
                    matmul_tn_acc(pg.buf(ib), &a, g, m, p, n);
                }
            }))
        } else {
            None
        };
        Ok(make(data, vec![m, n], back))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2("transpose", self)?;
        let x = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let back: Option<BackFn> = self.live_id("transpose").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for j in 0..n {
                    for i in 0..m {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            }) as BackFn
        });
        Ok(make(data, vec![n, m], back))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::contract(format!(
                "reshape: {:?} has {} elements, target {:?} has {}",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        let back: Option<BackFn> = self.live_id("reshape").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| add_into(pg.buf(id), g)) as BackFn
        });
        Ok(make(self.to_vec(), shape.to_vec(), back))
    }

    // ── reductions and normalization ────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let back: Option<BackFn> = self.live_id("sum").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for v in buf.iter_mut().take(n) {
                    *v += g[0];
                }
            }) as BackFn
        });
        make(vec![s], vec![1], back)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Column sums of a 2-D tensor: [N×C] → [1×C].
    pub fn col_sums(&self) -> Result<Tensor> {
        let (rows, cols) = dims2("col_sums", self)?;
        let x = self.data();
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            add_into(&mut data, &x[r * cols..(r + 1) * cols]);
        }
        let back: Option<BackFn> = self.live_id("col_sums").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for r in 0..rows {
                    add_into(&mut buf[r * cols..(r + 1) * cols], g);
                }
            }) as BackFn
        });
        Ok(make(data, vec![1, cols], back))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::contract(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        if self.has_nan() {
            return Err(Error::numeric("softmax: non-finite input"));
        }
        let shape = self.shape().to_vec();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for k in 0..inner {
                let base = o * len * inner + k;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..len {
                    mx = mx.max(x[base + i * inner]);
                }
                let mut z = 0.0;
                for i in 0..len {
                    let e = (x[base + i * inner] - mx).exp();
                    data[base + i * inner] = e;
                    z += e;
                }
                for i in 0..len {
                    data[base + i * inner] /= z;
                }
            }
        }
        Ok(make_with_out(data, shape, |out| {
            self.live_id("softmax").map(|id| {
                Box::new(move |g: &[f64], pg: &mut PassGrads| {
                    let buf = pg.buf(id);
                    for o in 0..outer {
                        for k in 0..inner {
                            let base = o * len * inner + k;
                            let mut dot = 0.0;
                            for i in 0..len {
                                let ix = base + i * inner;
                                dot += g[ix] * out[ix];
                            }
                            for i in 0..len {
                                let ix = base + i * inner;
                                buf[ix] += out[ix] * (g[ix] - dot);
                            }
                        }
                    }
                }) as BackFn
            })
        }))
    }

    /// Row-wise layer normalization with learnable scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = dims2("layer_norm", self)?;
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let x = self.data_rc();
        let gd = gamma.data_rc();
        let bd = beta.data_rc();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mu: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mu) * is;
                xhat[r * cols + c] = h;
                data[r * cols + c] = gd[c] * h + bd[c];
            }
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let idx = self.live_id("layer_norm");
        let idg = gamma.live_id("layer_norm");
        let idb = beta.live_id("layer_norm");
        let back: Option<BackFn> = if idx.is_some() || idg.is_some() || idb.is_some() {
            Some(Box::new(move |g: &[f64], pg: &mut PassGrads| {
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let hrow = &xhat[r * cols..(r + 1) * cols];
                    if let Some(ix) = idx {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dh = grow[c] * gd[c];
                            m1 += dh;
                            m2 += dh * hrow[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        let buf = pg.buf(ix);
                        for c in 0..cols {
                            let dh = grow[c] * gd[c];
                            buf[r * cols + c] += inv_std[r] * (dh - m1 - hrow[c] * m2);
                        }
                    }
                    if let Some(ig) = idg {
                        let buf = pg.buf(ig);
                        for c in 0..cols {
                            buf[c] += grow[c] * hrow[c];
                        }
                    }
                    if let Some(ib) = idb {
                        add_into(pg.buf(ib), grow);
                    }
                }
            }))
        } else {
            None
        };
        Ok(make(data, vec![rows, cols], back))
    }

    /// Rows scaled to unit L2 norm (norm floored at 1e-12).
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (rows, cols) = dims2("l2_normalize_rows", self)?;
        let x = self.data_rc();
        let mut data = vec![0.0; rows * cols];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = n;
            for c in 0..cols {
                data[r * cols + c] = row[c] / n;
            }
        }
        let norms = Rc::new(norms);
        Ok(make_with_out(data, vec![rows, cols], |out| {
            self.live_id("l2_normalize_rows").map(|id| {
                Box::new(move |g: &[f64], pg: &mut PassGrads| {
                    let buf = pg.buf(id);
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let yrow = &out[r * cols..(r + 1) * cols];
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            buf[r * cols + c] += (grow[c] - yrow[c] * dot) / norms[r];
                        }
                    }
                }) as BackFn
            })
        }))
    }

    // ── structure: concat, slice, gather ────────────────────────────

    /// Stack 2-D tensors with equal column counts along rows.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty input"));
        }
        let (_, cols) = dims2("concat_rows", parts[0])?;
        let mut total_rows = 0;
        for p in parts {
            let (r, c) = dims2("concat_rows", p)?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        let mut spans = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            data.extend_from_slice(p.data());
            let len = p.numel();
            spans.push((p.live_id("concat_rows"), offset, len));
            offset += len;
        }
        let tracked = spans.iter().any(|(id, _, _)| id.is_some());
        let back: Option<BackFn> = tracked.then(|| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                for &(id, off, len) in &spans {
                    if let Some(id) = id {
                        add_into(pg.buf(id), &g[off..off + len]);
                    }
                }
            }) as BackFn
        });
        Ok(make(data, vec![total_rows, cols], back))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty input"));
        }
        let (rows, _) = dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        for p in parts {
            let (r, c) = dims2("concat_cols", p)?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
            total_cols += c;
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for r in 0..rows {
                data[r * total_cols + col_off..r * total_cols + col_off + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            spans.push((p.live_id("concat_cols"), col_off, w));
            col_off += w;
        }
        let tracked = spans.iter().any(|(id, _, _)| id.is_some());
        let back: Option<BackFn> = tracked.then(|| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                for &(id, off, w) in &spans {
                    if let Some(id) = id {
                        let buf = pg.buf(id);
                        for r in 0..rows {
                            add_into(
                                &mut buf[r * w..(r + 1) * w],
                                &g[r * total_cols + off..r * total_cols + off + w],
                            );
                        }
                    }
                }
            }) as BackFn
        });
        Ok(make(data, vec![rows, total_cols], back))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = dims2("slice_rows", self)?;
        if start + len > rows {
            return Err(Error::contract(format!(
                "slice_rows: [{start}, {}) out of {rows} rows",
                start + len
            )));
        }
        let data = self.data()[start * cols..(start + len) * cols].to_vec();
        let back: Option<BackFn> = self.live_id("slice_rows").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                add_into(&mut pg.buf(id)[start * cols..(start + len) * cols], g);
            }) as BackFn
        });
        Ok(make(data, vec![len, cols], back))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = dims2("slice_cols", self)?;
        if start + len > cols {
            return Err(Error::contract(format!(
                "slice_cols: [{start}, {}) out of {cols} cols",
                start + len
            )));
        }
        let x = self.data();
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let back: Option<BackFn> = self.live_id("slice_cols").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for r in 0..rows {
                    add_into(
                        &mut buf[r * cols + start..r * cols + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }) as BackFn
        });
        Ok(make(data, vec![rows, len], back))
    }

    /// Select rows by index (repeats allowed). Backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = dims2("gather_rows", self)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let idx: Rc<Vec<usize>> = Rc::new(indices.to_vec());
        let back: Option<BackFn> = self.live_id("gather_rows").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut buf[i * cols..(i + 1) * cols], &g[k * cols..(k + 1) * cols]);
                }
            }) as BackFn
        });
        Ok(make(data, vec![indices.len(), cols], back))
    }

    /// Flat gather with zero fill: `out[i] = idx[i] < 0 ? 0 : x[idx[i]]`.
    /// The index map is how strided/padded views (im2col) are expressed.
    pub fn gather_flat(&self, idx: Rc<Vec<i64>>, out_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = out_shape.iter().product();
        if idx.len() != numel {
            return Err(Error::contract(format!(
                "gather_flat: index length {} vs target numel {}",
                idx.len(),
                numel
            )));
        }
        let n = self.numel() as i64;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "gather_flat: index {bad} out of {n} elements"
            )));
        }
        let x = self.data();
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { x[i as usize] })
            .collect();
        let idx2 = idx.clone();
        let back: Option<BackFn> = self.live_id("gather_flat").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for (k, &i) in idx2.iter().enumerate() {
                    if i >= 0 {
                        buf[i as usize] += g[k];
                    }
                }
            }) as BackFn
        });
        Ok(make(data, out_shape.to_vec(), back))
    }

    // ── broadcasting helpers ────────────────────────────────────────

    /// Add a length-C vector to every row of an [N×C] tensor.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2("add_row_broadcast", self)?;
        if row.numel() != cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let x = self.data();
        let v = row.data_rc();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = x[r * cols + c] + v[c];
            }
        }
        let ida = self.live_id("add_row_broadcast");
        let idv = row.live_id("add_row_broadcast");
        let back: Option<BackFn> = if ida.is_some() || idv.is_some() {
            Some(Box::new(move |g: &[f64], pg: &mut PassGrads| {
                if let Some(ia) = ida {
                    add_into(pg.buf(ia), g);
                }
                if let Some(iv) = idv {
                    let buf = pg.buf(iv);
                    for r in 0..rows {
                        add_into(buf, &g[r * cols..(r + 1) * cols]);
                    }
                }
            }))
        } else {
            None
        };
        Ok(make(data, vec![rows, cols], back))
    }

    /// Per-column affine map: `out[r,c] = x[r,c]·scale[c] + bias[c]`.
    /// Scales and biases are plain constants (coordinate transforms).
    pub fn col_affine(&self, scale: &[f64], bias: &[f64]) -> Result<Tensor> {
        let (rows, cols) = dims2("col_affine", self)?;
        if scale.len() != cols || bias.len() != cols {
            return Err(Error::contract(format!(
                "col_affine: {cols} columns but {} scales / {} biases",
                scale.len(),
                bias.len()
            )));
        }
        let x = self.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = x[r * cols + c] * scale[c] + bias[c];
            }
        }
        let s: Rc<Vec<f64>> = Rc::new(scale.to_vec());
        let back: Option<BackFn> = self.live_id("col_affine").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for r in 0..rows {
                    for c in 0..cols {
                        buf[r * cols + c] += g[r * cols + c] * s[c];
                    }
                }
            }) as BackFn
        });
        Ok(make(data, vec![rows, cols], back))
    }

    // ── sampling ────────────────────────────────────────────────────

    /// Bilinear sampling of a rows-layout map: `values` is [(H·W)×C] with
    /// row `y·W + x`, `pts` is [P×2] pixel coordinates (x, y). Out-of-range
    /// texels contribute zero. Differentiable in both values and points.
    pub fn bilinear_rows(values: &Tensor, pts: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (vr, cols) = dims2("bilinear_rows", values)?;
        if vr != h * w {
            return Err(Error::contract(format!(
                "bilinear_rows: {vr} value rows but map is {h}x{w}"
            )));
        }
        let (np, two) = dims2("bilinear_rows", pts)?;
        if two != 2 {
            return Err(Error::contract(format!(
                "bilinear_rows: points must be [P×2], got {:?}",
                pts.shape()
            )));
        }
        debug_assert!(pts.data().iter().all(|v| v.is_finite()), "non-finite sample point");
        let v = values.data_rc();
        let p = pts.data_rc();
        let mut data = vec![0.0; np * cols];
        for q in 0..np {
            let x = p[q * 2];
            let y = p[q * 2 + 1];
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let out = &mut data[q * cols..(q + 1) * cols];
            // Exact texel hit: copy the row so integer-grid sampling is
            // bit-equal to direct indexing.
            if fx == 0.0 && fy == 0.0 {
                if in_map(x0, y0, w, h) {
                    let r = (y0 as usize) * w + x0 as usize;
                    out.copy_from_slice(&v[r * cols..(r + 1) * cols]);
                }
                continue;
            }
            for (cx, cy, wgt) in corner_weights(x0, y0, fx, fy) {
                if wgt != 0.0 && in_map(cx, cy, w, h) {
                    let r = (cy as usize) * w + cx as usize;
                    let row = &v[r * cols..(r + 1) * cols];
                    for (o, &val) in out.iter_mut().zip(row) {
                        *o += wgt * val;
                    }
                }
            }
        }
        let idv = values.live_id("bilinear_rows");
        let idp = pts.live_id("bilinear_rows");
        let back: Option<BackFn> = if idv.is_some() || idp.is_some() {
            Some(Box::new(move |g: &[f64], pg: &mut PassGrads| {
                for q in 0..np {
                    let x = p[q * 2];
                    let y = p[q * 2 + 1];
                    let x0 = x.floor();
                    let y0 = y.floor();
                    let fx = x - x0;
                    let fy = y - y0;
                    let gout = &g[q * cols..(q + 1) * cols];
                    if let Some(iv) = idv {
                        let buf = pg.buf(iv);
                        for (cx, cy, wgt) in corner_weights(x0, y0, fx, fy) {
                            if wgt != 0.0 && in_map(cx, cy, w, h) {
                                let r = (cy as usize) * w + cx as usize;
                                for (b, &gv) in
                                    buf[r * cols..(r + 1) * cols].iter_mut().zip(gout)
                                {
                                    *b += wgt * gv;
                                }
                            }
                        }
                    }
                    if let Some(ip) = idp {
                        // d w / d x and d w / d y per corner, same order as
                        // corner_weights: (x0,y0) (x1,y0) (x0,y1) (x1,y1).
                        let dwdx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
                        let dwdy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
                        let mut gx = 0.0;
                        let mut gy = 0.0;
                        for (k, (cx, cy, _)) in corner_weights(x0, y0, fx, fy).into_iter().enumerate()
                        {
                            if in_map(cx, cy, w, h) {
                                let r = (cy as usize) * w + cx as usize;
                                let row = &v[r * cols..(r + 1) * cols];
                                let dot: f64 = gout.iter().zip(row).map(|(a, b)| a * b).sum();
                                gx += dwdx[k] * dot;
                                gy += dwdy[k] * dot;
                            }
                        }
                        let buf = pg.buf(ip);
                        buf[q * 2] += gx;
                        buf[q * 2 + 1] += gy;
                    }
                }
            }))
        } else {
            None
        };
        Ok(make(data, vec![np, cols], back))
    }

    /// Bilinear sampling of a [C×H×W] feature map at normalized points in
    /// [0,1]²; `pixel = coord·size − 0.5` (texel-center alignment), zero
    /// padding outside the map. Returns [P×C].
    pub fn bilinear_sample(feat: &Tensor, pts: &Tensor) -> Result<Tensor> {
        let (c, h, w) = match feat.shape() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::contract(format!(
                    "bilinear_sample: feature map must be [C×H×W], got {s:?}"
                )))
            }
        };
        let rows = feat.reshape(&[c, h * w])?.transpose()?;
        let px = pts.col_affine(&[w as f64, h as f64], &[-0.5, -0.5])?;
        Tensor::bilinear_rows(&rows, &px, h, w)
    }

    // ── fused losses ────────────────────────────────────────────────

    /// Elementwise binary cross-entropy with logits (numerically stable).
    /// `targets` must be untracked; gradient flows to logits only.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Tensor> {
        same_shape("bce_with_logits", self, targets)?;
        if targets.is_tracked() {
            return Err(Error::contract(
                "bce_with_logits: targets must be a constant",
            ));
        }
        let z = self.data_rc();
        let y = targets.data_rc();
        let data: Vec<f64> = z
            .iter()
            .zip(y.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        let back: Option<BackFn> = self.live_id("bce_with_logits").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for i in 0..g.len() {
                    buf[i] += g[i] * (sigmoid_scalar(z[i]) - y[i]);
                }
            }) as BackFn
        });
        Ok(make(data, self.shape().to_vec(), back))
    }

    /// Per-row `−log softmax(row)[target]` of a [N×K] logit matrix → [N×1].
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Tensor> {
        let (rows, cols) = dims2("cross_entropy_rows", self)?;
        if targets.len() != rows {
            return Err(Error::contract(format!(
                "cross_entropy_rows: {rows} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::contract(format!(
                "cross_entropy_rows: target {bad} out of {cols} classes"
            )));
        }
        let x = self.data_rc();
        let tg: Rc<Vec<usize>> = Rc::new(targets.to_vec());
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            data[r] = lse - row[tg[r]];
        }
        let back: Option<BackFn> = self.live_id("cross_entropy_rows").map(|id| {
            Box::new(move |g: &[f64], pg: &mut PassGrads| {
                let buf = pg.buf(id);
                for r in 0..rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for c in 0..cols {
                        let p = (row[c] - mx).exp() / z;
                        let ind = if c == tg[r] { 1.0 } else { 0.0 };
                        buf[r * cols + c] += g[r] * (p - ind);
                    }
                }
            }) as BackFn
        });
        Ok(make(data, vec![rows, 1], back))
    }

    /// Per-row weighted sum of grouped value rows:
    /// `out[n] = Σ_g  w[n,g] · v[n·G + g]`, with `w` [N×G] and `v` [(N·G)×C].
    pub fn weighted_sum_rows(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
        let (n, groups) = dims2("weighted_sum_rows", weights)?;
        let (vrows, cols) = dims2("weighted_sum_rows", values)?;
        if vrows != n * groups {
            return Err(Error::Shape {
                op: "weighted_sum_rows",
                lhs: weights.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        let wd = weights.data_rc();
        let vd = values.data_rc();
        let mut data = vec![0.0; n * cols];
        for i in 0..n {
            let out = &mut data[i * cols..(i + 1) * cols];
            for g in 0..groups {
                let wv = wd[i * groups + g];
                if wv == 0.0 {
                    continue;
                }
                let row = &vd[(i * groups + g) * cols..(i * groups + g + 1) * cols];
                for (o, &val) in out.iter_mut().zip(row) {
                    *o += wv * val;
                }
            }
        }
        let idw = weights.live_id("weighted_sum_rows");
        let idv = values.live_id("weighted_sum_rows");
        let back: Option<BackFn> = if idw.is_some() || idv.is_some() {
            Some(Box::new(move |g: &[f64], pg: &mut PassGrads| {
                if let Some(iw) = idw {
                    let buf = pg.buf(iw);
                    for i in 0..n {
                        let gout = &g[i * cols..(i + 1) * cols];
                        for gr in 0..groups {
                            let row = &vd[(i * groups + gr) * cols..(i * groups + gr + 1) * cols];
                            let dot: f64 = gout.iter().zip(row).map(|(a, b)| a * b).sum();
                            buf[i * groups + gr] += dot;
                        }
                    }
                }
                if let Some(iv) = idv {
                    let buf = pg.buf(iv);
                    for i in 0..n {
                        let gout = &g[i * cols..(i + 1) * cols];
                        for gr in 0..groups {
                            let wv = wd[i * groups + gr];
                            if wv == 0.0 {
                                continue;
                            }
                            let brow =
                                &mut buf[(i * groups + gr) * cols..(i * groups + gr + 1) * cols];
                            for (b, &gv) in brow.iter_mut().zip(gout) {
                                *b += wv * gv;
                            }
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(make(data, vec![n, cols], back))
    }
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn in_map(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h
}

fn corner_weights(x0: f64, y0: f64, fx: f64, fy: f64) -> [(f64, f64, f64); 4] {
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ]
}

#[cfg(test)]
mod tests {
    use super::super::precision::{Precision, PrecisionGuard};
    use super::super::rng::RngState;
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[3, 3]).unwrap();
        let i3 = Tensor::eye(3);
        approx(i3.matmul(&b).unwrap().data(), b.data(), 0.0);
        let two = Tensor::from_vec(vec![2.0], &[1, 1]).unwrap();
        let three = Tensor::from_vec(vec![3.0], &[1, 1]).unwrap();
        assert_eq!(two.matmul(&three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let _m = PrecisionGuard::new(Precision::F64);
        let mut rng = RngState::new(5);
        let a = Tensor::randn(&mut rng, &[5, 4], 1.0);
        let b = Tensor::randn(&mut rng, &[4, 3], 1.0);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for r in 0..4 {
                    s += a.at2(i, r) * b.at2(r, j);
                }
                assert!((c.at2(i, j) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_is_associative() {
        let _m = PrecisionGuard::new(Precision::F64);
        let mut rng = RngState::new(9);
        let a = Tensor::randn(&mut rng, &[8, 8], 1.0);
        let b = Tensor::randn(&mut rng, &[8, 8], 1.0);
        let c = Tensor::randn(&mut rng, &[8, 8], 1.0);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        approx(left.data(), right.data(), 1e-5);
    }

    #[test]
    fn softmax_uniform_on_constant_rows() {
        let x = Tensor::zeros(&[3]);
        let y = x.softmax(0).unwrap();
        // Default storage is 32-bit, so compare at f32 resolution.
        approx(y.data(), &[1.0 / 3.0; 3], 1e-7);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0], &[4]).unwrap();
        let a = x.softmax(0).unwrap();
        let b = x.add_scalar(7.5).softmax(0).unwrap();
        approx(a.data(), b.data(), 1e-7);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let _m = PrecisionGuard::new(Precision::F64);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = x.softmax(0).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = x.data().iter().map(|v| v.exp() / z).collect();
        approx(y.data(), &oracle, 1e-7);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_inputs() {
        let mut rng = RngState::new(3);
        for _ in 0..20 {
            let x = Tensor::rand_uniform(&mut rng, &[4, 6], -50.0, 50.0);
            let y = x.softmax(1).unwrap();
            for r in 0..4 {
                let s: f64 = (0..6).map(|c| y.at2(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_vec(vec![1.0, f64::NAN], &[2]).unwrap();
        assert!(matches!(x.softmax(0), Err(Error::Numeric(_))));
    }

    #[test]
    fn sigmoid_basics() {
        let z = Tensor::zeros(&[1]);
        assert_eq!(z.sigmoid().data(), &[0.5]);
        let x = Tensor::from_vec(vec![0.7, -2.1, 3.0], &[3]).unwrap();
        let a = x.sigmoid();
        let b = x.neg().sigmoid();
        for i in 0..3 {
            assert!((a.data()[i] + b.data()[i] - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let _m = PrecisionGuard::new(Precision::F64);
        let err = super::super::fdcheck::finite_diff_check(
            |x| Ok(x.sigmoid().sum()),
            &Tensor::zeros(&[1]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
        super::super::tape::with_fresh_tape(|| {
            let x = Tensor::zeros(&[1]).requires_grad();
            x.sigmoid().sum().backward().unwrap();
            approx(&x.grad().unwrap().unwrap().to_vec(), &[0.25], 1e-12);
        });
    }

    #[test]
    fn backward_identity_and_square() {
        super::super::tape::with_fresh_tape(|| {
            let x = Tensor::from_vec(vec![5.0], &[1]).unwrap().requires_grad();
            x.sum().backward().unwrap();
            approx(&x.grad().unwrap().unwrap().to_vec(), &[1.0], 0.0);
        });
        super::super::tape::with_fresh_tape(|| {
            let x = Tensor::from_vec(vec![3.0], &[1]).unwrap().requires_grad();
            x.mul(&x).unwrap().sum().backward().unwrap();
            approx(&x.grad().unwrap().unwrap().to_vec(), &[6.0], 0.0);
        });
    }

    #[test]
    fn repeated_backward_accumulates() {
        super::super::tape::with_fresh_tape(|| {
            let x = Tensor::from_vec(vec![2.0], &[1]).unwrap().requires_grad();
            let y = x.mul_scalar(3.0).sum();
            y.backward().unwrap();
            y.backward().unwrap();
            approx(&x.grad().unwrap().unwrap().to_vec(), &[6.0], 0.0);
        });
    }

    #[test]
    fn bilinear_texel_center_and_midpoint() {
        let _m = PrecisionGuard::new(Precision::F64);
        // 1 channel, 2x2 map: values 1 2 / 3 4.
        let feat = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        // Texel (1,0) center in normalized coords: ((1+0.5)/2, (0+0.5)/2).
        let pts = Tensor::from_vec(vec![0.75, 0.25], &[1, 2]).unwrap();
        let v = Tensor::bilinear_sample(&feat, &pts).unwrap();
        assert_eq!(v.data(), &[2.0]);
        // Midpoint between texels (0,0) and (1,0): x=0.5 → pixel 0.5.
        let mid = Tensor::from_vec(vec![0.5, 0.25], &[1, 2]).unwrap();
        let v = Tensor::bilinear_sample(&feat, &mid).unwrap();
        approx(v.data(), &[1.5], 1e-12);
    }

    #[test]
    fn bilinear_out_of_range_is_zero() {
        let feat = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        let pts = Tensor::from_vec(vec![-1.0, -1.0], &[1, 2]).unwrap();
        let v = Tensor::bilinear_sample(&feat, &pts).unwrap();
        assert_eq!(v.data(), &[0.0]);
    }

    #[test]
    fn bilinear_integer_grid_is_bit_equal_to_indexing() {
        let _m = PrecisionGuard::new(Precision::F64);
        let mut rng = RngState::new(17);
        let h = 3;
        let w = 4;
        let feat = Tensor::randn(&mut rng, &[2, h, w], 1.0);
        let mut pts = Vec::new();
        for y in 0..h {
            for x in 0..w {
                pts.push((x as f64 + 0.5) / w as f64);
                pts.push((y as f64 + 0.5) / h as f64);
            }
        }
        let out = Tensor::bilinear_sample(&feat, &Tensor::from_vec(pts, &[h * w, 2]).unwrap()).unwrap();
        let fd = feat.data();
        for y in 0..h {
            for x in 0..w {
                for c in 0..2 {
                    let direct = fd[c * h * w + y * w + x];
                    let sampled = out.at2(y * w + x, c);
                    assert!(sampled == direct, "texel ({x},{y}) ch {c}: {sampled} != {direct}");
                }
            }
        }
    }

    #[test]
    fn gather_flat_zero_fill() {
        let x = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let idx = Rc::new(vec![2, -1, 0, -1]);
        let y = x.gather_flat(idx, &[4]).unwrap();
        assert_eq!(y.data(), &[30.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn clamp_blocks_gradient_at_saturation() {
        super::super::tape::with_fresh_tape(|| {
            let x = Tensor::from_vec(vec![-2.0, 0.0, 2.0], &[3]).unwrap().requires_grad();
            x.clamp(-1.0, 1.0).sum().backward().unwrap();
            approx(&x.grad().unwrap().unwrap().to_vec(), &[0.0, 1.0, 0.0], 0.0);
        });
    }

    #[test]
    fn bce_with_logits_matches_naive_formula() {
        let _m = PrecisionGuard::new(Precision::F64);
        let z = Tensor::from_vec(vec![2.0, -3.0, 0.0, 40.0], &[4]).unwrap();
        let y = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0], &[4]).unwrap();
        let got = z.bce_with_logits(&y).unwrap();
        for i in 0..4 {
            let p = sigmoid_scalar(z.data()[i]);
            let naive = -(y.data()[i] * p.ln() + (1.0 - y.data()[i]) * (1.0 - p).ln());
            if naive.is_finite() {
                assert!((got.data()[i] - naive).abs() < 1e-9);
            } else {
                // Saturated case: the fused form must stay finite.
                assert!(got.data()[i].is_finite());
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = RngState::new(2);
        let x = Tensor::randn(&mut rng, &[5, 16], 3.0);
        let g = Tensor::full(&[16], 1.0);
        let b = Tensor::zeros(&[16]);
        let y = x.layer_norm(&g, &b, 1e-9).unwrap();
        for r in 0..5 {
            let row: Vec<f64> = (0..16).map(|c| y.at2(r, c)).collect();
            let mu: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
        }
    }
}
