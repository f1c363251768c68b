//! Dense row-major f32 tensors with explicit shape checks.
//!
//! Storage is 32-bit; reductions, matrix multiplies, and convolutions
//! accumulate in 64-bit with a fixed summation order, so forward evaluation
//! is bit-reproducible. There is no broadcasting except scalar-tensor and the
//! explicit `*_rowwise` ops that apply a per-feature tensor across a batch.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, validating that the shape matches the data length and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArg {
                op: "Tensor::new",
                msg: format!("zero-sized dimension in shape {:?}", shape),
            });
        }
        if numel(&shape) != data.len() {
            return Err(Error::InvalidArg {
                op: "Tensor::new",
                msg: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArg {
                op: "Tensor::new",
                msg: format!("non-finite value {v}"),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs whose finiteness is guaranteed by
    /// construction from finite inputs.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_raw(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Tensor::from_raw(shape.to_vec(), vec![value; numel(shape)])
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f32) -> Self {
        Tensor::from_raw(vec![], vec![value])
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor::from_raw(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn scalar_value(&self) -> Result<f32> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidArg {
                op: "scalar_value",
                msg: format!("tensor has shape {:?}", self.shape),
            })
        }
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| v + s).collect())
    }

    pub fn mul_scalar(&self, s: f32) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| v * s).collect())
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Elementwise tanh, evaluated in f64 so near-saturated inputs keep their
    /// remaining resolution after the cast back to f32.
    pub fn tanh(&self) -> Tensor {
        let data = self.data.iter().map(|&v| (v as f64).tanh() as f32).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    /// Elementwise exp. Errors on overflow so the all-finite invariant holds.
    pub fn exp(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            let e = (v as f64).exp() as f32;
            if !e.is_finite() {
                return Err(Error::InvalidArg {
                    op: "exp",
                    msg: format!("exp({v}) overflows f32"),
                });
            }
            data.push(e);
        }
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    /// Elementwise natural log; errors on any non-positive input.
    pub fn ln(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.data.len());
        for &v in &self.data {
            if v <= 0.0 {
                return Err(Error::LogDomain { op: "ln" });
            }
            data.push((v as f64).ln() as f32);
        }
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_raw(self.shape.clone(), data)
    }

    /// Matrix multiply `[m,k] x [k,n] -> [m,n]` with f64 accumulation.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let row = &self.data[i * k..(i + 1) * k];
            for (kk, &a) in row.iter().enumerate() {
                let brow = &other.data[kk * n..(kk + 1) * n];
                let a = a as f64;
                for (j, &b) in brow.iter().enumerate() {
                    acc[j] += a * b as f64;
                }
            }
            for j in 0..n {
                out[i * n + j] = acc[j] as f32;
            }
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Sum of all elements, f64 accumulation in index order.
    pub fn sum_all(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn mean_all(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Sum over one axis; output drops that axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::InvalidArg {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for m in 0..mid {
                    acc += self.data[(o * mid + m) * inner + i] as f64;
                }
                out[o * inner + i] = acc as f32;
            }
        }
        Ok(Tensor::from_raw(out_shape, out))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let summed = self.sum_axis(axis)?;
        Ok(summed.mul_scalar(1.0 / self.shape[axis] as f32))
    }

    /// Add a per-feature tensor `v` to every row of a batch `[n, ...]` whose
    /// per-item shape equals `v.shape()`.
    pub fn add_rowwise(&self, v: &Tensor) -> Result<Tensor> {
        self.rowwise(v, "add_rowwise", |a, b| a + b)
    }

    /// Multiply every row of a batch by a per-feature tensor.
    pub fn mul_rowwise(&self, v: &Tensor) -> Result<Tensor> {
        self.rowwise(v, "mul_rowwise", |a, b| a * b)
    }

    fn rowwise(&self, v: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape.len() < 2 || self.shape[1..] != v.shape[..] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let row = v.data.len();
        let mut out = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks_exact(row) {
            out.extend(chunk.iter().zip(v.data.iter()).map(|(&a, &b)| f(a, b)));
        }
        Ok(Tensor::from_raw(self.shape.clone(), out))
    }

    /// Row-stable softmax over the last axis of a `[n, k]` tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArg {
                op: "softmax_rows",
                msg: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        let k = self.shape[1];
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(k) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|&e| (e / sum) as f32));
        }
        Ok(Tensor::from_raw(self.shape.clone(), out))
    }

    /// Index of the max entry in each row of a `[n, k]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArg {
                op: "argmax_rows",
                msg: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        let k = self.shape[1];
        Ok(self
            .data
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }
}

/// 2-D convolution over `[n, c_in, h, w]` with kernel `[c_out, c_in, kh, kw]`,
/// per-output-channel bias, zero padding, f64 accumulation per output pixel.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if b.shape() != [ws[0]] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: b.shape().to_vec(),
            rhs: vec![ws[0]],
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArg {
            op: "conv2d",
            msg: "stride must be >= 1".into(),
        });
    }
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::InvalidArg {
            op: "conv2d",
            msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    let xd = x.data();
    let wdt = w.data();
    let bd = b.data();
    if stride == 1 && pad == 0 {
        // hot path: contiguous kernel-row dot products, no bounds checks
        for ni in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    let orow = ((ni * c_out + co) * oh + oy) * ow;
                    for ox in 0..ow {
                        let mut acc = bd[co] as f64;
                        for ci in 0..c_in {
                            let xbase = ((ni * c_in + ci) * h + oy) * wd + ox;
                            let wbase = ((co * c_in + ci) * kh) * kw;
                            for ky in 0..kh {
                                let xrow = &xd[xbase + ky * wd..xbase + ky * wd + kw];
                                let wrow = &wdt[wbase + ky * kw..wbase + (ky + 1) * kw];
                                for (xv, wv) in xrow.iter().zip(wrow.iter()) {
                                    acc += *xv as f64 * *wv as f64;
                                }
                            }
                        }
                        out[orow + ox] = acc as f32;
                    }
                }
            }
        }
        return Ok(Tensor::from_raw(vec![n, c_out, oh, ow], out));
    }
    for ni in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[co] as f64;
                    for ci in 0..c_in {
                        let xbase = ((ni * c_in + ci) * h) * wd;
                        let wbase = ((co * c_in + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix >= wd + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += xd[xbase + iy * wd + ix] as f64
                                    * wdt[wbase + ky * kw + kx] as f64;
                            }
                        }
                    }
                    out[((ni * c_out + co) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![n, c_out, oh, ow], out))
}

/// 2x2 max pooling with stride 2 over `[n, c, h, w]`. Also returns the flat
/// input index of each selected maximum, for the backward pass.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let xs = x.shape();
    if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
        return Err(Error::InvalidArg {
            op: "maxpool2",
            msg: format!("expected [n,c,h,w] with h,w >= 2, got {:?}", xs),
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = base + (oy * 2 + dy) * w + (ox * 2 + dx);
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (nc * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::from_raw(vec![n, c, oh, ow], out), argmax))
}

/// Fused softmax + mean cross-entropy of logits `[n, k]` against integer
/// labels. Returns the scalar loss; the per-row log-sum-exp is done in f64.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<f32> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::InvalidArg {
            op: "cross_entropy",
            msg: format!("label {bad} out of range for {k} classes"),
        });
    }
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels.iter()) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = row
            .iter()
            .map(|&v| ((v as f64) - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        total += lse - row[label as usize] as f64;
    }
    Ok((total / labels.len() as f64) as f32)
}
