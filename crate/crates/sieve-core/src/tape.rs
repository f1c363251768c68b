//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Nodes append to an arena in forward order, so node ids are already a
//! topological order and the backward pass is a single reverse sweep that
//! visits each node exactly once. Gradients accumulate (sum) across fan-out.
//!
//! Leaves registered with [`Tape::leaf`] receive gradients; values registered
//! with [`Tape::constant`] do not, and no backward work is spent on branches
//! that cannot reach a leaf. A frozen classifier's parameters enter the tape
//! as constants, which is what lets the sieve loss backpropagate through the
//! network into the additive noise without touching the model.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;

enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f32),
    Neg(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Relu(NodeId),
    /// Fused sigma = (1 + tanh(rho)) / 2 * cap. Decomposed f32 steps lose
    /// the tiny (1 + tanh) residue to rounding near saturation; the fused
    /// form evaluates in f64 end to end, matching
    /// [`crate::noisemap::reparameterize_sigma`] bit for bit.
    SigmaReparam { rho: NodeId, cap: f32 },
    Matmul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
    AddRowwise {
        x: NodeId,
        v: NodeId,
    },
    MulRowwise {
        x: NodeId,
        v: NodeId,
    },
    /// Fused softmax + mean cross-entropy against fixed integer labels.
    CrossEntropy {
        logits: NodeId,
        labels: Vec<u32>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Register a tracked leaf: a tensor gradients will be reported for.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Register an untracked input. It participates in the forward pass but
    /// never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), v, g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), v, g))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), v, g))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.value(a).add_scalar(s);
        let g = self.ng(a);
        self.push(Op::AddScalar(a), v, g)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.value(a).mul_scalar(s);
        let g = self.ng(a);
        self.push(Op::MulScalar(a, s), v, g)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).neg();
        let g = self.ng(a);
        self.push(Op::Neg(a), v, g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        let g = self.ng(a);
        self.push(Op::Tanh(a), v, g)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).exp()?;
        let g = self.ng(a);
        Ok(self.push(Op::Exp(a), v, g))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).ln()?;
        let g = self.ng(a);
        Ok(self.push(Op::Ln(a), v, g))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        let g = self.ng(a);
        self.push(Op::Relu(a), v, g)
    }

    /// sigma = (1 + tanh(rho)) / 2 * cap as a single f64-evaluated op.
    pub fn sigma_reparam(&mut self, rho: NodeId, cap: f32) -> Result<NodeId> {
        let v = crate::noisemap::reparameterize_sigma(self.value(rho), cap)?;
        let g = self.ng(rho);
        Ok(self.push(Op::SigmaReparam { rho, cap }, v, g))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Matmul(a, b), v, g))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = tensor::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, v, g))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = tensor::maxpool2(self.value(x))?;
        let g = self.ng(x);
        Ok(self.push(Op::MaxPool2 { x, argmax }, v, g))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_all());
        let g = self.ng(a);
        self.push(Op::SumAll(a), v, g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean_all());
        let g = self.ng(a);
        self.push(Op::MeanAll(a), v, g)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        let g = self.ng(a);
        Ok(self.push(Op::Reshape(a), v, g))
    }

    pub fn add_rowwise(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let val = self.value(x).add_rowwise(self.value(v))?;
        let g = self.ng(x) || self.ng(v);
        Ok(self.push(Op::AddRowwise { x, v }, val, g))
    }

    pub fn mul_rowwise(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let val = self.value(x).mul_rowwise(self.value(v))?;
        let g = self.ng(x) || self.ng(v);
        Ok(self.push(Op::MulRowwise { x, v }, val, g))
    }

    /// Mean cross-entropy of logits against integer labels (scalar output).
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        let loss = tensor::cross_entropy(self.value(logits), labels)?;
        let g = self.ng(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            g,
        ))
    }

    /// Gradient of `loss` with respect to a node; zeros if nothing flowed.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.grads[id] {
            Some(g) => Tensor::from_raw(self.nodes[id].value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(self.nodes[id].value.shape()),
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f32]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi += di;
                }
            }
            None => self.grads[id] = Some(delta.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss node. Errors if the loss has more
    /// than one element.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss].value.shape()
                ),
            });
        }
        self.grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let d = self.grads[id].take().unwrap();
            self.backward_op(id, &d);
            self.grads[id] = Some(d);
        }
        Ok(())
    }

    fn backward_op(&mut self, id: NodeId, d: &[f32]) {
        // Borrow-friendly accessors: values are read through raw indices and
        // gradient contributions are built in locals before accumulation.
        macro_rules! val {
            ($i:expr) => {
                self.nodes[$i].value.data()
            };
        }
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.ng(a) {
                    self.accumulate(a, d);
                }
                if self.ng(b) {
                    self.accumulate(b, d);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.ng(a) {
                    self.accumulate(a, d);
                }
                if self.ng(b) {
                    let neg: Vec<f32> = d.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.ng(a) {
                    let da: Vec<f32> = d.iter().zip(val!(b)).map(|(d, b)| d * b).collect();
                    self.accumulate(a, &da);
                }
                if self.ng(b) {
                    let db: Vec<f32> = d.iter().zip(val!(a)).map(|(d, a)| d * a).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::AddScalar(a) => {
                let a = *a;
                if self.ng(a) {
                    self.accumulate(a, d);
                }
            }
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                if self.ng(a) {
                    let da: Vec<f32> = d.iter().map(|v| v * s).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Neg(a) => {
                let a = *a;
                if self.ng(a) {
                    let da: Vec<f32> = d.iter().map(|v| -v).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                if self.ng(a) {
                    // sech^2 from the input in f64: the stored f32 output
                    // saturates to +/-1 long before the true derivative
                    // underflows, and the noise-map training relies on the
                    // tiny-but-nonzero gradient at large |rho|.
                    let da: Vec<f32> = d
                        .iter()
                        .zip(val!(a))
                        .map(|(d, &x)| {
                            let c = (x as f64).cosh();
                            (*d as f64 / (c * c)) as f32
                        })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if self.ng(a) {
                    let y = self.nodes[id].value.data();
                    let da: Vec<f32> = d.iter().zip(y).map(|(d, y)| d * y).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Ln(a) => {
                let a = *a;
                if self.ng(a) {
                    let da: Vec<f32> = d.iter().zip(val!(a)).map(|(d, x)| d / x).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.ng(a) {
                    let da: Vec<f32> = d
                        .iter()
                        .zip(val!(a))
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
            }
            Op::SigmaReparam { rho, cap } => {
                let (rho, cap) = (*rho, *cap);
                if self.ng(rho) {
                    // d sigma / d rho = (cap / 2) * sech^2(rho), in f64
                    let da: Vec<f32> = d
                        .iter()
                        .zip(val!(rho))
                        .map(|(d, &r)| {
                            let c = (r as f64).cosh();
                            (*d as f64 * cap as f64 / 2.0 / (c * c)) as f32
                        })
                        .collect();
                    self.accumulate(rho, &da);
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b].value.shape()[1];
                if self.ng(a) {
                    // d_a = d @ b^T
                    let bd = self.nodes[b].value.data();
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += d[i * n + j] as f64 * bd[kk * n + j] as f64;
                            }
                            da[i * k + kk] = acc as f32;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.ng(b) {
                    // d_b = a^T @ d
                    let ad = self.nodes[a].value.data();
                    let mut db = vec![0.0f64; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = ad[i * k + kk] as f64;
                            for j in 0..n {
                                db[kk * n + j] += aik * d[i * n + j] as f64;
                            }
                        }
                    }
                    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xs = self.nodes[x].value.shape().to_vec();
                let ws = self.nodes[w].value.shape().to_vec();
                let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                let want_x = self.ng(x);
                let want_w = self.ng(w);
                let want_b = self.ng(b);
                let xd = self.nodes[x].value.data();
                let wdt = self.nodes[w].value.data();
                let mut dx = if want_x { vec![0.0f64; xd.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![0.0f64; wdt.len()] } else { Vec::new() };
                let mut db = if want_b { vec![0.0f64; c_out] } else { Vec::new() };
                if stride == 1 && pad == 0 {
                    // hot path mirroring the forward: whole kernel rows at once
                    for ni in 0..n {
                        for co in 0..c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = d[((ni * c_out + co) * oh + oy) * ow + ox] as f64;
                                    if g == 0.0 {
                                        continue;
                                    }
                                    if want_b {
                                        db[co] += g;
                                    }
                                    for ci in 0..c_in {
                                        let xbase = ((ni * c_in + ci) * h + oy) * wd + ox;
                                        let wbase = ((co * c_in + ci) * kh) * kw;
                                        for ky in 0..kh {
                                            let xoff = xbase + ky * wd;
                                            let woff = wbase + ky * kw;
                                            if want_w {
                                                let xrow = &xd[xoff..xoff + kw];
                                                let drow = &mut dw[woff..woff + kw];
                                                for (dv, xv) in drow.iter_mut().zip(xrow.iter())
                                                {
                                                    *dv += g * *xv as f64;
                                                }
                                            }
                                            if want_x {
                                                let wrow = &wdt[woff..woff + kw];
                                                let drow = &mut dx[xoff..xoff + kw];
                                                for (dv, wv) in drow.iter_mut().zip(wrow.iter())
                                                {
                                                    *dv += g * *wv as f64;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                } else {
                    for ni in 0..n {
                        for co in 0..c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = d[((ni * c_out + co) * oh + oy) * ow + ox] as f64;
                                    if g == 0.0 {
                                        continue;
                                    }
                                    if want_b {
                                        db[co] += g;
                                    }
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
                                                if want_w {
                                                    dw[wbase + ky * kw + kx] +=
                                                        g * xd[xbase + iy * wd + ix] as f64;
                                                }
                                                if want_x {
                                                    dx[xbase + iy * wd + ix] +=
                                                        g * wdt[wbase + ky * kw + kx] as f64;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    let dx: Vec<f32> = dx.into_iter().map(|v| v as f32).collect();
                    self.accumulate(x, &dx);
                }
                if want_w {
                    let dw: Vec<f32> = dw.into_iter().map(|v| v as f32).collect();
                    self.accumulate(w, &dw);
                }
                if want_b {
                    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                if self.ng(x) {
                    let mut dx = vec![0.0f32; self.nodes[x].value.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += d[o];
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::SumAll(a) => {
                let a = *a;
                if self.ng(a) {
                    let da = vec![d[0]; self.nodes[a].value.len()];
                    self.accumulate(a, &da);
                }
            }
            Op::MeanAll(a) => {
                let a = *a;
                if self.ng(a) {
                    let n = self.nodes[a].value.len() as f32;
                    let da = vec![d[0] / n; self.nodes[a].value.len()];
                    self.accumulate(a, &da);
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if self.ng(a) {
                    self.accumulate(a, d);
                }
            }
            Op::AddRowwise { x, v } => {
                let (x, v) = (*x, *v);
                let row = self.nodes[v].value.len();
                if self.ng(x) {
                    self.accumulate(x, d);
                }
                if self.ng(v) {
                    let mut dv = vec![0.0f64; row];
                    for chunk in d.chunks_exact(row) {
                        for (dvi, &di) in dv.iter_mut().zip(chunk.iter()) {
                            *dvi += di as f64;
                        }
                    }
                    let dv: Vec<f32> = dv.into_iter().map(|v| v as f32).collect();
                    self.accumulate(v, &dv);
                }
            }
            Op::MulRowwise { x, v } => {
                let (x, v) = (*x, *v);
                let row = self.nodes[v].value.len();
                if self.ng(x) {
                    let vd = self.nodes[v].value.data();
                    let mut dx = Vec::with_capacity(d.len());
                    for chunk in d.chunks_exact(row) {
                        dx.extend(chunk.iter().zip(vd.iter()).map(|(&di, &vi)| di * vi));
                    }
                    self.accumulate(x, &dx);
                }
                if self.ng(v) {
                    let xd = self.nodes[x].value.data();
                    let mut dv = vec![0.0f64; row];
                    for (chunk, xrow) in d.chunks_exact(row).zip(xd.chunks_exact(row)) {
                        for i in 0..row {
                            dv[i] += chunk[i] as f64 * xrow[i] as f64;
                        }
                    }
                    let dv: Vec<f32> = dv.into_iter().map(|v| v as f32).collect();
                    self.accumulate(v, &dv);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let l = *logits;
                if self.ng(l) {
                    let probs = self.nodes[l].value.softmax_rows().expect("logits are rank 2");
                    let k = self.nodes[l].value.shape()[1];
                    let n = labels.len() as f32;
                    let scale = d[0] / n;
                    let mut dl = probs.data().to_vec();
                    for (row, &label) in dl.chunks_exact_mut(k).zip(labels.iter()) {
                        row[label as usize] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    self.accumulate(l, &dl);
                }
            }
        }
    }
}

/// Central-difference gradient of a scalar function, element by element.
///
/// The function returns f64 and the quotient divides by the step that was
/// actually realized after f32 rounding of the probe, so the check itself
/// accumulates in 64-bit. `f` must be deterministic: any internal randomness
/// has to be fixed by seed.
pub fn finite_difference_gradient<F>(mut f: F, at: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArg {
            op: "finite_difference_gradient",
            msg: format!("step h must be positive, got {h}"),
        });
    }
    let mut grad = vec![0.0f32; at.len()];
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let xp = probe.data()[i] as f64;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let xm = probe.data()[i] as f64;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = ((fp - fm) / (xp - xm)) as f32;
    }
    Tensor::new(at.shape().to_vec(), grad)
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate, with denominators floored to dodge 0/0.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(&a, &n)| {
            let denom = (a.abs() as f64).max(n.abs() as f64).max(1e-6);
            ((a - n).abs() as f64) / denom
        })
        .fold(0.0, f64::max)
}
