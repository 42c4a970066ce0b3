//! Dense row-major `f64` tensors of rank 0 to 4.
//!
//! A `Tensor` is a plain value: construction validates that the element count
//! matches the dims and that every element is finite. Differentiable
//! computation happens on a [`crate::tape::Tape`]; the forward kernels here
//! are shared between tape ops and direct (no-grad) evaluation.

use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, validating rank, element count, and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds maximum {}",
                dims.len(),
                MAX_RANK
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "zero-sized dimension in {dims:?}"
            )));
        }
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                expect
            )));
        }
        ensure_finite("tensor construction", &data)?;
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v]).expect("finite scalar")
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![0.0; n]).expect("valid zero tensor")
    }

    pub fn filled(dims: &[usize], v: f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![v; n]).expect("finite fill")
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Seeded uniform draw in `[lo, hi)`, element order row-major.
    pub fn uniform<R: Rng>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(dims.to_vec(), data).expect("valid uniform tensor")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a rank-0 (or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Bitwise equality of dims and payload, for determinism checks.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = zip_map(&self.data, &other.data, |a, b| a + b);
        out("add", self.dims.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = zip_map(&self.data, &other.data, |a, b| a - b);
        out("sub", self.dims.clone(), data)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|v| v * s).collect();
        out("scale", self.dims.clone(), data)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(Error::InvalidInterval { lo, hi });
        }
        let data = self.data.iter().map(|v| v.clamp(lo, hi)).collect();
        out("clamp", self.dims.clone(), data)
    }

    /// Cosine similarity between two rank-1 tensors.
    pub fn cosine_similarity(&self, other: &Tensor) -> Result<f64> {
        same_shape("cosine_similarity", self, other)?;
        cosine(&self.data, &other.data)
    }

    /// Row index of the maximum element; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

fn out(op: &'static str, dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    ensure_finite(op, &data)?;
    Ok(Tensor {
        dims,
        data,
        requires_grad: false,
    })
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.dims.clone(),
            rhs: b.dims.clone(),
        });
    }
    Ok(())
}

pub(crate) fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

// ── Forward kernels ─────────────────────────────────────────────────────
//
// Shared by the tape ops and by no-grad evaluation paths. All loops run in
// a fixed order so results are bit-deterministic.

/// `a[m,k] · b[k,n]`, row-major.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Cosine similarity of two equal-length slices. Errors on zero norms.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Output spatial extent of a convolution/pooling window.
pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Cross-correlation of `input[N,C,H,W]` with `kernel[F,C,k,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_kernel(
    input: &[f64],
    kernel: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let ho = conv_out_extent(h, k, stride, padding);
    let wo = conv_out_extent(w, k, stride, padding);
    let mut outv = vec![0.0; n * f * ho * wo];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let inp = &input[(ni * c + ci) * h * w..];
                        let ker = &kernel[((fi * c + ci) * k * k)..((fi * c + ci) * k * k + k * k)];
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += inp[iy as usize * w + ix as usize] * ker[ky * k + kx];
                            }
                        }
                    }
                    outv[((ni * f + fi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    outv
}

/// Row-wise softmax over the last axis (max-subtracted for stability).
pub(crate) fn softmax_rows(data: &[f64], row: usize) -> Vec<f64> {
    let mut res = Vec::with_capacity(data.len());
    for chunk in data.chunks(row) {
        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = chunk.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        res.extend(exps.iter().map(|e| e / sum));
    }
    res
}

/// Row-wise log-softmax over the last axis.
pub(crate) fn log_softmax_rows(data: &[f64], row: usize) -> Vec<f64> {
    let mut res = Vec::with_capacity(data.len());
    for chunk in data.chunks(row) {
        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = chunk.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        res.extend(chunk.iter().map(|v| v - lse));
    }
    res
}
