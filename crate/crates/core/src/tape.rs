//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape is define-by-run: every operation appends one node holding the
//! forward value, the recorded primitive, and a needs-grad flag propagated
//! from its inputs. `backward` replays the records in reverse, accumulating
//! gradients for every node on a path from a `requires_grad` leaf to the
//! loss. A tape is single-threaded; independent tapes may run concurrently
//! on disjoint data.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_kernel, conv_out_extent, cosine, ensure_finite, log_softmax_rows, matmul_kernel,
    softmax_rows, zip_map, Tensor,
};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Recorded primitive with its input references and backward metadata.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// `[m,k]·[k,n]` or batched `[B,m,k]·[B,k,n]`.
    Matmul(usize, usize),
    Reshape(usize),
    /// Swap of the last two axes (rank 2 or 3).
    Transpose(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// `x[N,F,H,W] + b[F]` broadcast over channel.
    ChannelBias(usize, usize),
    Relu(usize),
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    /// Mean over the token axis: `[N,P,E] -> [N,E]`.
    MeanPool(usize),
    Softmax(usize),
    LogSoftmax(usize),
    /// Rank-1 pair -> scalar, or rank-2 pair -> per-row vector.
    Cosine(usize, usize),
    Clamp {
        input: usize,
        lo: f64,
        hi: f64,
    },
    /// `x[N,d]·w[K,d]ᵀ + b[K]`.
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    /// `[N,C,H,W] -> [N,P,C·p·p]` for a p×p patch grid.
    ExtractPatches {
        input: usize,
        patch: usize,
    },
    /// `batch[N,C,H,W] + single[C,H,W]` broadcast over the batch axis.
    AddImageBatch(usize, usize),
    MeanAll(usize),
    SumAll(usize),
    /// `x[N,K] -> x[:, col]`.
    Column {
        input: usize,
        col: usize,
    },
    /// Mean of `-logp[i, labels[i]]`.
    NllLoss {
        logp: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run gradient tape. Rebuilt for every forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded operations (including leaves).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every record; no dangling references can survive because vars
    /// are plain indices owned by the caller.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
    }

    /// Enter a tensor as a leaf. Gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Gradient accumulated for `v` by the latest `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let dims = self.dims(v);
        self.grads.borrow()[v.0]
            .as_ref()
            .map(|g| Tensor::new(dims, g.clone()).expect("gradients are finite"))
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn record(
        &self,
        op_name: &'static str,
        dims: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs: bool,
    ) -> Result<Var> {
        ensure_finite(op_name, &data)?;
        let t = Tensor::new(dims, data)?;
        Ok(self.push(t, op, needs))
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.dims() != tb.dims() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let data = zip_map(ta.data(), tb.data(), f);
        let dims = ta.dims().to_vec();
        drop(nodes);
        self.record(name, dims, data, op, self.needs(a) || self.needs(b))
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (t.dims().to_vec(), t.data().iter().map(|v| v + s).collect())
        };
        self.record("add_scalar", dims, data, Op::AddScalar(a.0), self.needs(a))
    }

    pub fn sub_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.add_scalar(a, -s)
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (t.dims().to_vec(), t.data().iter().map(|v| v * s).collect())
        };
        self.record(
            "mul_scalar",
            dims,
            data,
            Op::MulScalar(a.0, s),
            self.needs(a),
        )
    }

    pub fn div_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.mul_scalar(a, 1.0 / s)
    }

    /// Matrix product. Accepts `[m,k]·[k,n]` or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ta.dims().to_vec(),
            rhs: tb.dims().to_vec(),
        };
        let (dims, data) = match (ta.dims(), tb.dims()) {
            ([m, k], [k2, n]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                (
                    vec![*m, *n],
                    matmul_kernel(ta.data(), tb.data(), *m, *k, *n),
                )
            }
            ([bs, m, k], [bs2, k2, n]) => {
                if bs != bs2 || k != k2 {
                    return Err(mismatch());
                }
                let mut data = Vec::with_capacity(bs * m * n);
                for i in 0..*bs {
                    data.extend(matmul_kernel(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        *m,
                        *k,
                        *n,
                    ));
                }
                (vec![*bs, *m, *n], data)
            }
            _ => return Err(mismatch()),
        };
        drop(nodes);
        self.record(
            "matmul",
            dims,
            data,
            Op::Matmul(a.0, b.0),
            self.needs(a) || self.needs(b),
        )
    }

    pub fn reshape(&self, a: Var, dims: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        let expect: usize = dims.iter().product();
        if expect != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.dims().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        let data = t.data().to_vec();
        drop(nodes);
        self.record("reshape", dims.to_vec(), data, Op::Reshape(a.0), self.needs(a))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        let (dims, data) = transpose_last_two(t)?;
        drop(nodes);
        self.record("transpose", dims, data, Op::Transpose(a.0), self.needs(a))
    }

    // ── Convolution and pooling ─────────────────────────────────────────

    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (ti, tk) = (&nodes[input.0].value, &nodes[kernel.0].value);
        let (n, c, h, w) = quad_dims("conv2d", ti)?;
        let (f, ck, kh, kw) = quad_dims("conv2d", tk)?;
        if ck != c || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: ti.dims().to_vec(),
                rhs: tk.dims().to_vec(),
            });
        }
        let k = kh;
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = conv_out_extent(h, k, stride, padding);
        let wo = conv_out_extent(w, k, stride, padding);
        let data = conv2d_kernel(ti.data(), tk.data(), n, c, h, w, f, k, stride, padding);
        drop(nodes);
        self.record(
            "conv2d",
            vec![n, f, ho, wo],
            data,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                padding,
            },
            self.needs(input) || self.needs(kernel),
        )
    }

    /// Add a per-channel bias `b[F]` to `x[N,F,H,W]`.
    pub fn channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (tx, tb) = (&nodes[x.0].value, &nodes[b.0].value);
        let (n, f, h, w) = quad_dims("channel_bias", tx)?;
        if tb.dims() != [f] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                lhs: tx.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let hw = h * w;
        let mut data = tx.data().to_vec();
        for ni in 0..n {
            for fi in 0..f {
                let base = (ni * f + fi) * hw;
                let bv = tb.data()[fi];
                for v in &mut data[base..base + hw] {
                    *v += bv;
                }
            }
        }
        let dims = tx.dims().to_vec();
        drop(nodes);
        self.record(
            "channel_bias",
            dims,
            data,
            Op::ChannelBias(x.0, b.0),
            self.needs(x) || self.needs(b),
        )
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (
                t.dims().to_vec(),
                t.data().iter().map(|v| v.max(0.0)).collect(),
            )
        };
        self.record("relu", dims, data, Op::Relu(x.0), self.needs(x))
    }

    /// Max pooling over `k`×`k` windows with stride `s`; gradient routes to
    /// the first maximum in row-major scan order.
    pub fn max_pool2d(&self, x: Var, k: usize, s: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let (n, c, h, w) = quad_dims("max_pool2d", t)?;
        if k > h || k > w {
            return Err(Error::InvalidArgument(format!(
                "pool window {k} larger than input {h}x{w}"
            )));
        }
        let ho = conv_out_extent(h, k, s, 0);
        let wo = conv_out_extent(w, k, s, 0);
        let mut data = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for nc in 0..n * c {
            let plane = &t.data()[nc * h * w..(nc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = (oy * s) * w + ox * s;
                    let mut best = plane[best_idx];
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (oy * s + ky) * w + (ox * s + kx);
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (nc * ho + oy) * wo + ox;
                    data[o] = best;
                    argmax[o] = nc * h * w + best_idx;
                }
            }
        }
        drop(nodes);
        self.record(
            "max_pool2d",
            vec![n, c, ho, wo],
            data,
            Op::MaxPool2d {
                input: x.0,
                argmax,
            },
            self.needs(x),
        )
    }

    /// Mean over the token axis: `[N,P,E] -> [N,E]`.
    pub fn mean_pool(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let [n, p, e] = *t.dims() else {
            return Err(Error::ShapeMismatch {
                op: "mean_pool",
                lhs: t.dims().to_vec(),
                rhs: vec![],
            });
        };
        let mut data = vec![0.0; n * e];
        for ni in 0..n {
            for pi in 0..p {
                let row = &t.data()[(ni * p + pi) * e..(ni * p + pi + 1) * e];
                for (acc, v) in data[ni * e..(ni + 1) * e].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        for v in &mut data {
            *v /= p as f64;
        }
        drop(nodes);
        self.record("mean_pool", vec![n, e], data, Op::MeanPool(x.0), self.needs(x))
    }

    // ── Nonlinearities over the last axis ───────────────────────────────

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let row = last_axis("softmax", t)?;
        let data = softmax_rows(t.data(), row);
        let dims = t.dims().to_vec();
        drop(nodes);
        self.record("softmax", dims, data, Op::Softmax(x.0), self.needs(x))
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let row = last_axis("log_softmax", t)?;
        let data = log_softmax_rows(t.data(), row);
        let dims = t.dims().to_vec();
        drop(nodes);
        self.record("log_softmax", dims, data, Op::LogSoftmax(x.0), self.needs(x))
    }

    /// Cosine similarity. Rank-1 inputs give a rank-0 output; rank-2 inputs
    /// of shape `[N,d]` give the per-row similarities `[N]`.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.dims() != tb.dims() {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                lhs: ta.dims().to_vec(),
                rhs: tb.dims().to_vec(),
            });
        }
        let (dims, data) = match ta.dims() {
            [_] => (vec![], vec![cosine(ta.data(), tb.data())?]),
            [n, d] => {
                let mut vals = Vec::with_capacity(*n);
                for i in 0..*n {
                    vals.push(cosine(
                        &ta.data()[i * d..(i + 1) * d],
                        &tb.data()[i * d..(i + 1) * d],
                    )?);
                }
                (vec![*n], vals)
            }
            other => {
                return Err(Error::ShapeMismatch {
                    op: "cosine_similarity",
                    lhs: other.to_vec(),
                    rhs: other.to_vec(),
                })
            }
        };
        drop(nodes);
        self.record(
            "cosine_similarity",
            dims,
            data,
            Op::Cosine(a.0, b.0),
            self.needs(a) || self.needs(b),
        )
    }

    /// Elementwise clamp; subgradient is 1 on `[lo, hi]` inclusive, 0 outside.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidInterval { lo, hi });
        }
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (
                t.dims().to_vec(),
                t.data().iter().map(|v| v.clamp(lo, hi)).collect(),
            )
        };
        self.record(
            "clamp",
            dims,
            data,
            Op::Clamp { input: x.0, lo, hi },
            self.needs(x),
        )
    }

    /// Affine map `x[N,d]·w[K,d]ᵀ + b[K]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (tx, tw, tb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
        let ([n, d], [kk, d2]) = (dims2("linear", tx)?, dims2("linear", tw)?);
        if d != d2 || tb.dims() != [kk] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tx.dims().to_vec(),
                rhs: tw.dims().to_vec(),
            });
        }
        let mut data = vec![0.0; n * kk];
        for i in 0..n {
            let xrow = &tx.data()[i * d..(i + 1) * d];
            for j in 0..kk {
                let wrow = &tw.data()[j * d..(j + 1) * d];
                let mut acc = tb.data()[j];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                data[i * kk + j] = acc;
            }
        }
        drop(nodes);
        self.record(
            "linear",
            vec![n, kk],
            data,
            Op::Linear {
                input: x.0,
                weight: w.0,
                bias: b.0,
            },
            self.needs(x) || self.needs(w) || self.needs(b),
        )
    }

    /// Cut `x[N,C,H,W]` into non-overlapping `p`×`p` patches, flattening each
    /// to a row: output `[N, (H/p)·(W/p), C·p·p]`.
    pub fn extract_patches(&self, x: Var, p: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let (n, c, h, w) = quad_dims("extract_patches", t)?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {p} does not divide input {h}x{w}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let tokens = gh * gw;
        let dim = c * p * p;
        let mut data = vec![0.0; n * tokens * dim];
        for ni in 0..n {
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    let out_base = (ni * tokens + tok) * dim;
                    for ci in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                let src = ((ni * c + ci) * h + gy * p + py) * w + gx * p + px;
                                data[out_base + (ci * p + py) * p + px] = t.data()[src];
                            }
                        }
                    }
                }
            }
        }
        drop(nodes);
        self.record(
            "extract_patches",
            vec![n, tokens, dim],
            data,
            Op::ExtractPatches { input: x.0, patch: p },
            self.needs(x),
        )
    }

    /// Add one image-shaped tensor to every sample of a batch:
    /// `batch[N,C,H,W] + single[C,H,W]`.
    pub fn add_image_batch(&self, batch: Var, single: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (tb, ts) = (&nodes[batch.0].value, &nodes[single.0].value);
        let (n, c, h, w) = quad_dims("add_image_batch", tb)?;
        if ts.dims() != [c, h, w] {
            return Err(Error::ShapeMismatch {
                op: "add_image_batch",
                lhs: tb.dims().to_vec(),
                rhs: ts.dims().to_vec(),
            });
        }
        let chw = c * h * w;
        let mut data = tb.data().to_vec();
        for ni in 0..n {
            for (v, s) in data[ni * chw..(ni + 1) * chw].iter_mut().zip(ts.data()) {
                *v += s;
            }
        }
        let dims = tb.dims().to_vec();
        drop(nodes);
        self.record(
            "add_image_batch",
            dims,
            data,
            Op::AddImageBatch(batch.0, single.0),
            self.needs(batch) || self.needs(single),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let (numel, sum) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (t.numel(), t.data().iter().sum::<f64>())
        };
        self.record(
            "mean_all",
            vec![],
            vec![sum / numel as f64],
            Op::MeanAll(x.0),
            self.needs(x),
        )
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let sum = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.data().iter().sum::<f64>()
        };
        self.record("sum_all", vec![], vec![sum], Op::SumAll(x.0), self.needs(x))
    }

    /// Select one column of `x[N,K]`.
    pub fn column(&self, x: Var, col: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        let [n, k] = dims2("column", t)?;
        if col >= k {
            return Err(Error::ClassOutOfRange {
                class: col,
                num_classes: k,
            });
        }
        let data = (0..n).map(|i| t.data()[i * k + col]).collect();
        drop(nodes);
        self.record(
            "column",
            vec![n],
            data,
            Op::Column { input: x.0, col },
            self.needs(x),
        )
    }

    /// Mean negative log-likelihood of `logp[N,K]` at the given labels.
    pub fn nll_loss(&self, logp: Var, labels: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let t = &nodes[logp.0].value;
        let [n, k] = dims2("nll_loss", t)?;
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "nll_loss: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes: k,
            });
        }
        let mut acc = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            acc -= t.data()[i * k + l];
        }
        drop(nodes);
        self.record(
            "nll_loss",
            vec![],
            vec![acc / n as f64],
            Op::NllLoss {
                logp: logp.0,
                labels: labels.to_vec(),
            },
            self.needs(logp),
        )
    }

    // ── Reverse pass ────────────────────────────────────────────────────

    /// Accumulate gradients of a scalar `loss` into every node that needs
    /// them, replaying the tape in reverse topological (recording) order.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            ensure_finite("backward", g)?;
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// Accumulate `g` (gradient at node `i`) into the gradients of its inputs.
fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let acc = |grads: &mut [Option<Vec<f64>>], j: usize, contrib: &mut dyn FnMut(&mut [f64])| {
        if !nodes[j].needs_grad {
            return;
        }
        let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
        contrib(slot);
    };
    let val = |j: usize| nodes[j].value.data();
    let dims = |j: usize| nodes[j].value.dims();

    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, *a, &mut |d| add_into(d, g));
            acc(grads, *b, &mut |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(grads, *a, &mut |d| add_into(d, g));
            acc(grads, *b, &mut |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(grads, *a, &mut |d| {
                for ((x, y), z) in d.iter_mut().zip(g).zip(vb) {
                    *x += y * z;
                }
            });
            acc(grads, *b, &mut |d| {
                for ((x, y), z) in d.iter_mut().zip(g).zip(va) {
                    *x += y * z;
                }
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(grads, *a, &mut |d| {
                for ((x, y), z) in d.iter_mut().zip(g).zip(vb) {
                    *x += y / z;
                }
            });
            acc(grads, *b, &mut |d| {
                for i in 0..d.len() {
                    d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            });
        }
        Op::AddScalar(a) => acc(grads, *a, &mut |d| add_into(d, g)),
        Op::MulScalar(a, s) => {
            let s = *s;
            acc(grads, *a, &mut |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x += y * s;
                }
            });
        }
        Op::Matmul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            match (dims(*a), dims(*b)) {
                ([m, k], [_, n]) => {
                    let (m, k, n) = (*m, *k, *n);
                    // dA = G·Bᵀ ; dB = Aᵀ·G
                    acc(grads, *a, &mut |d| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * vb[p * n + j];
                                }
                                d[i * k + p] += s;
                            }
                        }
                    });
                    acc(grads, *b, &mut |d| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += va[i * k + p] * g[i * n + j];
                                }
                                d[p * n + j] += s;
                            }
                        }
                    });
                }
                ([bs, m, k], [_, _, n]) => {
                    let (bs, m, k, n) = (*bs, *m, *k, *n);
                    acc(grads, *a, &mut |d| {
                        for bi in 0..bs {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let vbb = &vb[bi * k * n..(bi + 1) * k * n];
                            let db = &mut d[bi * m * k..(bi + 1) * m * k];
                            for i in 0..m {
                                for p in 0..k {
                                    let mut s = 0.0;
                                    for j in 0..n {
                                        s += gb[i * n + j] * vbb[p * n + j];
                                    }
                                    db[i * k + p] += s;
                                }
                            }
                        }
                    });
                    acc(grads, *b, &mut |d| {
                        for bi in 0..bs {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let vab = &va[bi * m * k..(bi + 1) * m * k];
                            let db = &mut d[bi * k * n..(bi + 1) * k * n];
                            for p in 0..k {
                                for j in 0..n {
                                    let mut s = 0.0;
                                    for i in 0..m {
                                        s += vab[i * k + p] * gb[i * n + j];
                                    }
                                    db[p * n + j] += s;
                                }
                            }
                        }
                    });
                }
                _ => unreachable!("matmul recorded with valid dims"),
            }
        }
        Op::Reshape(a) => acc(grads, *a, &mut |d| add_into(d, g)),
        Op::Transpose(a) => {
            let in_dims = dims(*a).to_vec();
            acc(grads, *a, &mut |d| {
                // transpose the output gradient back into input layout
                match in_dims.as_slice() {
                    [r, c] => {
                        for y in 0..*r {
                            for x in 0..*c {
                                d[y * c + x] += g[x * r + y];
                            }
                        }
                    }
                    [b, r, c] => {
                        for bi in 0..*b {
                            let gb = &g[bi * r * c..(bi + 1) * r * c];
                            let db = &mut d[bi * r * c..(bi + 1) * r * c];
                            for y in 0..*r {
                                for x in 0..*c {
                                    db[y * c + x] += gb[x * r + y];
                                }
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            });
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (vi, vk) = (val(*input), val(*kernel));
            let [n, c, h, w] = dims(*input) else { unreachable!() };
            let [f, _, k, _] = dims(*kernel) else { unreachable!() };
            let (n, c, h, w, f, k) = (*n, *c, *h, *w, *f, *k);
            let (s, p) = (*stride, *padding);
            let ho = conv_out_extent(h, k, s, p);
            let wo = conv_out_extent(w, k, s, p);
            let visit = |din: &mut dyn FnMut(usize, f64), dker: &mut dyn FnMut(usize, f64)| {
                for ni in 0..n {
                    for fi in 0..f {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[((ni * f + fi) * ho + oy) * wo + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    for ky in 0..k {
                                        let iy = (oy * s + ky) as isize - p as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * s + kx) as isize - p as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let ii = ((ni * c + ci) * h + iy as usize) * w
                                                + ix as usize;
                                            let ki = ((fi * c + ci) * k + ky) * k + kx;
                                            din(ii, go * vk[ki]);
                                            dker(ki, go * vi[ii]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            };
            // Accumulate into local buffers first: the two targets may alias
            // grads slots only through distinct indices, but borrowck wants
            // one mutable region at a time.
            let need_in = nodes[*input].needs_grad;
            let need_ker = nodes[*kernel].needs_grad;
            let mut din_buf = vec![0.0; if need_in { n * c * h * w } else { 0 }];
            let mut dker_buf = vec![0.0; if need_ker { f * c * k * k } else { 0 }];
            visit(
                &mut |i, v| {
                    if need_in {
                        din_buf[i] += v;
                    }
                },
                &mut |i, v| {
                    if need_ker {
                        dker_buf[i] += v;
                    }
                },
            );
            if need_in {
                acc(grads, *input, &mut |d| add_into(d, &din_buf));
            }
            if need_ker {
                acc(grads, *kernel, &mut |d| add_into(d, &dker_buf));
            }
        }
        Op::ChannelBias(x, b) => {
            let [n, f, h, w] = dims(*x) else { unreachable!() };
            let (n, f, hw) = (*n, *f, h * w);
            acc(grads, *x, &mut |d| add_into(d, g));
            acc(grads, *b, &mut |d| {
                for ni in 0..n {
                    for (fi, dv) in d.iter_mut().enumerate().take(f) {
                        let base = (ni * f + fi) * hw;
                        *dv += g[base..base + hw].iter().sum::<f64>();
                    }
                }
            });
        }
        Op::Relu(a) => {
            let va = val(*a);
            acc(grads, *a, &mut |d| {
                for i in 0..d.len() {
                    if va[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::MaxPool2d { input, argmax } => {
            acc(grads, *input, &mut |d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            });
        }
        Op::MeanPool(a) => {
            let [_, p, e] = dims(*a) else { unreachable!() };
            let (p, e) = (*p, *e);
            acc(grads, *a, &mut |d| {
                let inv = 1.0 / p as f64;
                for (tok, chunk) in d.chunks_mut(e).enumerate() {
                    let ni = tok / p;
                    for (j, x) in chunk.iter_mut().enumerate() {
                        *x += g[ni * e + j] * inv;
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let s = nodes[i].value.data();
            let row = *dims(*a).last().expect("softmax rank >= 1");
            acc(grads, *a, &mut |d| {
                for r in 0..d.len() / row {
                    let sr = &s[r * row..(r + 1) * row];
                    let gr = &g[r * row..(r + 1) * row];
                    let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..row {
                        d[r * row + j] += sr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let ls = nodes[i].value.data();
            let row = *dims(*a).last().expect("log_softmax rank >= 1");
            acc(grads, *a, &mut |d| {
                for r in 0..d.len() / row {
                    let gr = &g[r * row..(r + 1) * row];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..row {
                        d[r * row + j] += gr[j] - ls[r * row + j].exp() * gsum;
                    }
                }
            });
        }
        Op::Cosine(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let d = match dims(*a) {
                [d] => *d,
                [_, d] => *d,
                _ => unreachable!(),
            };
            let rows = va.len() / d;
            // d cos/d a = b/(|a||b|) − cos·a/|a|² ; symmetric in b.
            let mut da = vec![0.0; va.len()];
            let mut db = vec![0.0; vb.len()];
            for r in 0..rows {
                let ar = &va[r * d..(r + 1) * d];
                let br = &vb[r * d..(r + 1) * d];
                let na2: f64 = ar.iter().map(|v| v * v).sum();
                let nb2: f64 = br.iter().map(|v| v * v).sum();
                let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let cos = dot / (na * nb);
                let gr = g[r];
                for j in 0..d {
                    da[r * d + j] += gr * (br[j] / (na * nb) - cos * ar[j] / na2);
                    db[r * d + j] += gr * (ar[j] / (na * nb) - cos * br[j] / nb2);
                }
            }
            acc(grads, *a, &mut |dst| add_into(dst, &da));
            acc(grads, *b, &mut |dst| add_into(dst, &db));
        }
        Op::Clamp { input, lo, hi } => {
            let vi = val(*input);
            let (lo, hi) = (*lo, *hi);
            acc(grads, *input, &mut |d| {
                for i in 0..d.len() {
                    if vi[i] >= lo && vi[i] <= hi {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (vx, vw) = (val(*input), val(*weight));
            let [n, d] = dims(*input) else { unreachable!() };
            let [k, _] = dims(*weight) else { unreachable!() };
            let (n, d, k) = (*n, *d, *k);
            acc(grads, *input, &mut |dst| {
                for i in 0..n {
                    for p in 0..d {
                        let mut s = 0.0;
                        for j in 0..k {
                            s += g[i * k + j] * vw[j * d + p];
                        }
                        dst[i * d + p] += s;
                    }
                }
            });
            acc(grads, *weight, &mut |dst| {
                for j in 0..k {
                    for p in 0..d {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += g[i * k + j] * vx[i * d + p];
                        }
                        dst[j * d + p] += s;
                    }
                }
            });
            acc(grads, *bias, &mut |dst| {
                for i in 0..n {
                    for j in 0..k {
                        dst[j] += g[i * k + j];
                    }
                }
            });
        }
        Op::ExtractPatches { input, patch } => {
            let [n, c, h, w] = dims(*input) else { unreachable!() };
            let (n, c, h, w, p) = (*n, *c, *h, *w, *patch);
            let (gh, gw) = (h / p, w / p);
            let tokens = gh * gw;
            let dim = c * p * p;
            acc(grads, *input, &mut |d| {
                for ni in 0..n {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let tok = gy * gw + gx;
                            let out_base = (ni * tokens + tok) * dim;
                            for ci in 0..c {
                                for py in 0..p {
                                    for px in 0..p {
                                        let src =
                                            ((ni * c + ci) * h + gy * p + py) * w + gx * p + px;
                                        d[src] += g[out_base + (ci * p + py) * p + px];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::AddImageBatch(batch, single) => {
            let [n, c, h, w] = dims(*batch) else { unreachable!() };
            let chw = c * h * w;
            let n = *n;
            acc(grads, *batch, &mut |d| add_into(d, g));
            acc(grads, *single, &mut |d| {
                for ni in 0..n {
                    add_into(d, &g[ni * chw..(ni + 1) * chw]);
                }
            });
        }
        Op::MeanAll(a) => {
            let numel = nodes[*a].value.numel();
            let gv = g[0] / numel as f64;
            acc(grads, *a, &mut |d| {
                for x in d.iter_mut() {
                    *x += gv;
                }
            });
        }
        Op::SumAll(a) => {
            let gv = g[0];
            acc(grads, *a, &mut |d| {
                for x in d.iter_mut() {
                    *x += gv;
                }
            });
        }
        Op::Column { input, col } => {
            let [_, k] = dims(*input) else { unreachable!() };
            let (k, col) = (*k, *col);
            acc(grads, *input, &mut |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[i * k + col] += gv;
                }
            });
        }
        Op::NllLoss { logp, labels } => {
            let [_, k] = dims(*logp) else { unreachable!() };
            let k = *k;
            let scale = g[0] / labels.len() as f64;
            acc(grads, *logp, &mut |d| {
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn quad_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.dims() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match t.dims() {
        [a, b] => Ok([*a, *b]),
        other => Err(Error::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<usize> {
    t.dims().last().copied().ok_or(Error::ShapeMismatch {
        op,
        lhs: vec![],
        rhs: vec![0],
    })
}

fn transpose_last_two(t: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    match t.dims() {
        [r, c] => {
            let (r, c) = (*r, *c);
            let mut data = vec![0.0; r * c];
            for y in 0..r {
                for x in 0..c {
                    data[x * r + y] = t.data()[y * c + x];
                }
            }
            Ok((vec![c, r], data))
        }
        [b, r, c] => {
            let (b, r, c) = (*b, *r, *c);
            let mut data = vec![0.0; b * r * c];
            for bi in 0..b {
                let src = &t.data()[bi * r * c..(bi + 1) * r * c];
                let dst = &mut data[bi * r * c..(bi + 1) * r * c];
                for y in 0..r {
                    for x in 0..c {
                        dst[x * r + y] = src[y * c + x];
                    }
                }
            }
            Ok((vec![b, c, r], data))
        }
        other => Err(Error::ShapeMismatch {
            op: "transpose",
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn transpose_involution() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 1.0).collect();
        let a = tape.leaf(t(&[3, 4], &data));
        let tt = tape.transpose(tape.transpose(a).unwrap()).unwrap();
        assert!(tape.value(tt).bit_eq(&tape.value(a)));
    }

    #[test]
    fn grad_of_sum_of_product_is_other_factor() {
        let tape = Tape::new();
        let av = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, -0.25, 1.5]).with_grad();
        let bv = t(&[2, 3], &[1.0, 2.0, -0.5, 0.25, 4.0, -2.0]);
        let a = tape.leaf(av);
        let b = tape.leaf(bv.clone());
        let prod = tape.mul(a, b).unwrap();
        let s = tape.sum_all(prod).unwrap();
        tape.backward(s).unwrap();
        let ga = tape.grad(a).unwrap();
        for (g, expect) in ga.data().iter().zip(bv.data()) {
            assert_eq!(g, expect);
        }
        // b did not ask for a gradient
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let k = tape.leaf(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..25).map(|i| (i as f64).sin()).collect();
        let x = tape.leaf(t(&[1, 1, 5, 5], &data));
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0; // single 1 at center
        let k = tape.leaf(t(&[1, 1, 3, 3], &kdata));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert!(tape.value(y).bit_eq(&t(&[1, 1, 5, 5], &data)));
    }

    #[test]
    fn conv_kernel_too_large_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, 1, 0).is_err());
    }

    #[test]
    fn relu_and_softmax_hand_values() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(z).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[1.0, -2.0, 0.5, 3.0, 100.0, 100.0, 99.0, 98.0]));
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s);
        for row in v.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[0.3, -1.2, 2.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        let ls = tape.log_softmax(x).unwrap();
        for (a, b) in tape.value(ls).data().iter().zip(tape.value(s).data()) {
            assert!((a - b.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn cosine_rank1_and_rank2() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[3.0, 4.0]));
        let b = tape.leaf(t(&[2], &[4.0, 3.0]));
        let c = tape.cosine_similarity(a, b).unwrap();
        assert!((tape.item(c) - 0.96).abs() < 1e-15);

        let a2 = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let b2 = tape.leaf(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let c2 = tape.cosine_similarity(a2, b2).unwrap();
        assert_eq!(tape.value(c2).data(), &[0.0, 1.0]);
    }

    #[test]
    fn clamp_grad_convention() {
        // subgradient: 1 inside [lo, hi] inclusive, 0 strictly outside
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[-2.0, -1.0, 0.5, 2.0]).with_grad());
        let c = tape.clamp(x, -1.0, 1.0).unwrap();
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn clear_leaves_no_records() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let _ = tape.add(x, x).unwrap();
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
            let y = tape.leaf(t(&[3, 2], &[1.0, -1.0, 0.5, 0.25, 2.0, -0.75]));
            let m = tape.matmul(x, y).unwrap();
            let s = tape.softmax(m).unwrap();
            tape.value(s)
        };
        assert!(run().bit_eq(&run()));
    }
}
