//! Reverse-mode differentiation over a flat tape of tensor operations.
//!
//! A [`Graph`] records every forward operation; [`Graph::backward`] replays
//! the tape in reverse and accumulates gradients into each node's `grad`
//! buffer. Leaves are plain tensors copied in by the caller; after the
//! reverse pass their gradients are read back with [`Graph::grad`].
//!
//! The op set is exactly what the extractor and the metric head need.
//! There is no broadcasting and no graph reuse: one tape per forward pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Record<S: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, filters: Var, stride: usize },
    BiasChannel { input: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    // y = Wᵀx with W square; gradient flows to both W and x.
    ProjectT { weight: Var, input: Var },
    Concat { inputs: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { input: Var, factor: S },
    Sum { input: Var },
    L2Norm { input: Var, norm: S },
    L2Normalize { input: Var, norm: S },
    OrthPenalty { weight: Var, lambda: S, residual: Vec<S> },
    SoftmaxCe { logits: Var, probs: Vec<S>, label: usize },
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Tensor<S>>,
    records: Vec<Record<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            records: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, record: Record<S>) -> Var {
        self.nodes.push(value);
        self.records.push(record);
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape as a differentiable leaf.
    pub fn leaf(&mut self, value: &Tensor<S>) -> Var {
        let mut t = value.clone();
        t.zero_grad();
        self.push(t, Record::Leaf)
    }

    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        Ok(self.push(Tensor::from_vec(shape, data)?, Record::Leaf))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0]
    }

    /// Scalar value of a shape-[1] node.
    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].data()[0]
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> &[S] {
        self.nodes[v.0].grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape(), self.nodes[b.0].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        let (da, db) = (self.nodes[a.0].data(), self.nodes[b.0].data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let row = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * row[j];
                }
            }
        }
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(t, Record::Matmul { a, b, m, k, n }))
    }

    /// Valid (no padding) cross-correlation.
    pub fn conv2d(&mut self, input: Var, filters: Var, stride: usize) -> Result<Var> {
        let (si, sf) = (self.nodes[input.0].shape(), self.nodes[filters.0].shape());
        if si.len() != 3 || sf.len() != 4 || si[0] != sf[1] {
            return Err(Error::dimension("conv2d", si, sf));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (f, kh, kw) = (sf[0], sf[2], sf[3]);
        if kh > h || kw > w {
            return Err(Error::dimension("conv2d kernel larger than input", si, sf));
        }
        if stride == 0 {
            return Err(Error::Precondition("conv2d stride must be positive".into()));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut out = vec![S::zero(); f * oh * ow];
        let di = self.nodes[input.0].data();
        let df = self.nodes[filters.0].data();
        for fo in 0..f {
            let fbase = fo * c * kh * kw;
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = S::zero();
                    for ci in 0..c {
                        for i in 0..kh {
                            let irow = &di[ci * h * w + (y * stride + i) * w + x * stride..];
                            let frow = &df[fbase + ci * kh * kw + i * kw..];
                            for j in 0..kw {
                                acc += irow[j] * frow[j];
                            }
                        }
                    }
                    out[fo * oh * ow + y * ow + x] = acc;
                }
            }
        }
        let t = Tensor::from_vec(&[f, oh, ow], out)?;
        Ok(self.push(t, Record::Conv2d { input, filters, stride }))
    }

    /// Adds a per-channel bias to a C×H×W map.
    pub fn bias_channel(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (si, sb) = (self.nodes[input.0].shape(), self.nodes[bias.0].shape());
        if si.len() != 3 || sb.len() != 1 || sb[0] != si[0] {
            return Err(Error::dimension("bias_channel", si, sb));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let mut out = self.nodes[input.0].data().to_vec();
        let db = self.nodes[bias.0].data();
        for ci in 0..c {
            let b = db[ci];
            for v in &mut out[ci * h * w..(ci + 1) * h * w] {
                *v += b;
            }
        }
        let t = Tensor::from_vec(si, out)?;
        Ok(self.push(t, Record::BiasChannel { input, bias }))
    }

    /// 2×2 non-overlapping max pool; ties go to the first element in
    /// row-major scan order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let si = self.nodes[input.0].shape();
        if si.len() != 3 || si[1] % 2 != 0 || si[2] % 2 != 0 {
            return Err(Error::dimension("maxpool2 needs even extents", si, &[2, 2]));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (oh, ow) = (h / 2, w / 2);
        let di = self.nodes[input.0].data();
        let mut out = vec![S::zero(); c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best_idx = ci * h * w + (2 * y) * w + 2 * x;
                    let mut best = di[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ci * h * w + (2 * y + dy) * w + 2 * x + dx;
                        if di[idx] > best {
                            best = di[idx];
                            best_idx = idx;
                        }
                    }
                    out[ci * oh * ow + y * ow + x] = best;
                    argmax[ci * oh * ow + y * ow + x] = best_idx;
                }
            }
        }
        let t = Tensor::from_vec(&[c, oh, ow], out)?;
        Ok(self.push(t, Record::MaxPool2 { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<S> = self.nodes[input.0]
            .data()
            .iter()
            .map(|v| if *v > S::zero() { *v } else { S::zero() })
            .collect();
        let t = Tensor::from_vec(self.nodes[input.0].shape(), out).expect("same shape");
        self.push(t, Record::Relu { input })
    }

    /// y = W·x + b with W of shape [out, in].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let si = self.nodes[input.0].shape().to_vec();
        let sw = self.nodes[weight.0].shape();
        let sb = self.nodes[bias.0].shape();
        let flat = self.nodes[input.0].len();
        if sw.len() != 2 || sw[1] != flat || sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::dimension("linear", &si, sw));
        }
        let (o, n) = (sw[0], sw[1]);
        let dx = self.nodes[input.0].data();
        let dw = self.nodes[weight.0].data();
        let db = self.nodes[bias.0].data();
        let mut out = vec![S::zero(); o];
        for oi in 0..o {
            let row = &dw[oi * n..(oi + 1) * n];
            let mut acc = db[oi];
            for i in 0..n {
                acc += row[i] * dx[i];
            }
            out[oi] = acc;
        }
        let t = Tensor::from_vec(&[o], out)?;
        Ok(self.push(t, Record::Linear { input, weight, bias }))
    }

    /// y = Wᵀ·x for square W; the FC realization of the metric layer.
    pub fn project_t(&mut self, weight: Var, input: Var) -> Result<Var> {
        let sw = self.nodes[weight.0].shape();
        let sx = self.nodes[input.0].shape();
        if sw.len() != 2 || sw[0] != sw[1] || sx.len() != 1 || sx[0] != sw[0] {
            return Err(Error::dimension("project_t", sw, sx));
        }
        let n = sw[0];
        let dw = self.nodes[weight.0].data();
        let dx = self.nodes[input.0].data();
        let mut out = vec![S::zero(); n];
        for i in 0..n {
            let xi = dx[i];
            let row = &dw[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += row[j] * xi;
            }
        }
        let t = Tensor::from_vec(&[n], out)?;
        Ok(self.push(t, Record::ProjectT { weight, input }))
    }

    /// Concatenates nodes (flattened) into one vector.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Precondition("concat of zero inputs".into()));
        }
        let mut out = Vec::new();
        for v in inputs {
            out.extend_from_slice(self.nodes[v.0].data());
        }
        let t = Tensor::from_vec(&[out.len()], out)?;
        Ok(self.push(t, Record::Concat { inputs: inputs.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Record::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Record::Sub { a, b })
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        rec: Record<S>,
    ) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape(), self.nodes[b.0].shape());
        if sa != sb {
            return Err(Error::dimension(name, sa, sb));
        }
        let out: Vec<S> = self.nodes[a.0]
            .data()
            .iter()
            .zip(self.nodes[b.0].data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::from_vec(sa, out)?;
        Ok(self.push(t, rec))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let out: Vec<S> = self.nodes[input.0].data().iter().map(|v| *v * factor).collect();
        let t = Tensor::from_vec(self.nodes[input.0].shape(), out).expect("same shape");
        self.push(t, Record::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: S = self.nodes[input.0].data().iter().copied().sum();
        self.push(Tensor::scalar(s), Record::Sum { input })
    }

    /// Euclidean norm as a scalar node. Subgradient 0 at the origin.
    pub fn l2norm(&mut self, input: Var) -> Var {
        let norm = self.nodes[input.0].norm();
        self.push(Tensor::scalar(norm), Record::L2Norm { input, norm })
    }

    /// x / ‖x‖₂. Errors on the zero vector.
    pub fn l2normalize(&mut self, input: Var) -> Result<Var> {
        let norm = self.nodes[input.0].norm();
        if norm == S::zero() {
            return Err(Error::DegenerateFeature);
        }
        let out: Vec<S> = self.nodes[input.0].data().iter().map(|v| *v / norm).collect();
        let t = Tensor::from_vec(self.nodes[input.0].shape(), out)?;
        Ok(self.push(t, Record::L2Normalize { input, norm }))
    }

    /// (λ/2)·‖WWᵀ − I‖²_F as a scalar node.
    pub fn orth_penalty(&mut self, weight: Var, lambda: S) -> Result<Var> {
        let sw = self.nodes[weight.0].shape();
        if sw.len() != 2 || sw[0] != sw[1] {
            return Err(Error::dimension("orth_penalty", sw, sw));
        }
        let n = sw[0];
        let dw = self.nodes[weight.0].data();
        // residual = WWᵀ − I
        let mut residual = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = S::zero();
                for p in 0..n {
                    acc += dw[i * n + p] * dw[j * n + p];
                }
                if i == j {
                    acc -= S::one();
                }
                residual[i * n + j] = acc;
            }
        }
        let fro2: S = residual.iter().map(|v| *v * *v).sum();
        let val = lambda / S::from_f64(2.0) * fro2;
        Ok(self.push(
            Tensor::scalar(val),
            Record::OrthPenalty { weight, lambda, residual },
        ))
    }

    /// Cross-entropy of a softmax over raw logits against an index label.
    pub fn softmax_ce(&mut self, logits: Var, label: usize) -> Result<Var> {
        let d = self.nodes[logits.0].data();
        if label >= d.len() {
            return Err(Error::Precondition(format!(
                "label {label} out of range for {} logits",
                d.len()
            )));
        }
        let max = d.iter().fold(S::neg_infinity(), |a, b| a.max(*b));
        let exps: Vec<S> = d.iter().map(|v| (*v - max).exp()).collect();
        let z: S = exps.iter().copied().sum();
        let probs: Vec<S> = exps.iter().map(|e| *e / z).collect();
        let val = -(probs[label].ln());
        Ok(self.push(
            Tensor::scalar(val),
            Record::SoftmaxCe { logits, probs, label },
        ))
    }

    /// Reverse pass seeded with ∂L/∂L = 1 at `loss` (must be scalar-shaped).
    /// Gradients accumulate, so multiple consumers of one node sum up.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].len(), 1, "backward seed must be scalar");
        self.nodes[loss.0].grad_mut()[0] = S::one();
        for idx in (0..self.records.len()).rev() {
            let g = self.nodes[idx].grad().to_vec();
            if g.iter().all(|v| *v == S::zero()) {
                continue;
            }
            match &self.records[idx] {
                Record::Leaf => {}
                Record::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let da = self.nodes[a.0].data().to_vec();
                    let db = self.nodes[b.0].data().to_vec();
                    {
                        let ga = self.nodes[a.0].grad_mut();
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = S::zero();
                                for j in 0..n {
                                    acc += g[i * n + j] * db[p * n + j];
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    let gb = self.nodes[b.0].grad_mut();
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = S::zero();
                            for i in 0..m {
                                acc += da[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += acc;
                        }
                    }
                }
                Record::Conv2d { input, filters, stride } => {
                    let (input, filters, stride) = (*input, *filters, *stride);
                    let si = self.nodes[input.0].shape().to_vec();
                    let sf = self.nodes[filters.0].shape().to_vec();
                    let (c, h, w) = (si[0], si[1], si[2]);
                    let (f, kh, kw) = (sf[0], sf[2], sf[3]);
                    let oh = (h - kh) / stride + 1;
                    let ow = (w - kw) / stride + 1;
                    let di = self.nodes[input.0].data().to_vec();
                    let df = self.nodes[filters.0].data().to_vec();
                    {
                        let gi = self.nodes[input.0].grad_mut();
                        for fo in 0..f {
                            let fbase = fo * c * kh * kw;
                            for y in 0..oh {
                                for x in 0..ow {
                                    let go = g[fo * oh * ow + y * ow + x];
                                    if go == S::zero() {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for i in 0..kh {
                                            let base = ci * h * w + (y * stride + i) * w + x * stride;
                                            let frow = &df[fbase + ci * kh * kw + i * kw..];
                                            for j in 0..kw {
                                                gi[base + j] += go * frow[j];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gf = self.nodes[filters.0].grad_mut();
                    for fo in 0..f {
                        let fbase = fo * c * kh * kw;
                        for y in 0..oh {
                            for x in 0..ow {
                                let go = g[fo * oh * ow + y * ow + x];
                                if go == S::zero() {
                                    continue;
                                }
                                for ci in 0..c {
                                    for i in 0..kh {
                                        let base = ci * h * w + (y * stride + i) * w + x * stride;
                                        let grow = &mut gf[fbase + ci * kh * kw + i * kw..];
                                        for j in 0..kw {
                                            grow[j] += go * di[base + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Record::BiasChannel { input, bias } => {
                    let (input, bias) = (*input, *bias);
                    let si = self.nodes[input.0].shape().to_vec();
                    let (c, hw) = (si[0], si[1] * si[2]);
                    {
                        let gi = self.nodes[input.0].grad_mut();
                        for (gi, gv) in gi.iter_mut().zip(&g) {
                            *gi += *gv;
                        }
                    }
                    let gb = self.nodes[bias.0].grad_mut();
                    for ci in 0..c {
                        let mut acc = S::zero();
                        for v in &g[ci * hw..(ci + 1) * hw] {
                            acc += *v;
                        }
                        gb[ci] += acc;
                    }
                }
                Record::MaxPool2 { input, argmax } => {
                    let input = *input;
                    let argmax = argmax.clone();
                    let gi = self.nodes[input.0].grad_mut();
                    for (o, src) in argmax.iter().enumerate() {
                        gi[*src] += g[o];
                    }
                }
                Record::Relu { input } => {
                    let input = *input;
                    let di = self.nodes[input.0].data().to_vec();
                    let gi = self.nodes[input.0].grad_mut();
                    for i in 0..di.len() {
                        if di[i] > S::zero() {
                            gi[i] += g[i];
                        }
                    }
                }
                Record::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let sw = self.nodes[weight.0].shape().to_vec();
                    let (o, n) = (sw[0], sw[1]);
                    let dx = self.nodes[input.0].data().to_vec();
                    let dw = self.nodes[weight.0].data().to_vec();
                    {
                        let gw = self.nodes[weight.0].grad_mut();
                        for oi in 0..o {
                            let go = g[oi];
                            if go == S::zero() {
                                continue;
                            }
                            let row = &mut gw[oi * n..(oi + 1) * n];
                            for i in 0..n {
                                row[i] += go * dx[i];
                            }
                        }
                    }
                    {
                        let gx = self.nodes[input.0].grad_mut();
                        for oi in 0..o {
                            let go = g[oi];
                            if go == S::zero() {
                                continue;
                            }
                            let row = &dw[oi * n..(oi + 1) * n];
                            for i in 0..n {
                                gx[i] += go * row[i];
                            }
                        }
                    }
                    let gb = self.nodes[bias.0].grad_mut();
                    for oi in 0..o {
                        gb[oi] += g[oi];
                    }
                }
                Record::ProjectT { weight, input } => {
                    let (weight, input) = (*weight, *input);
                    let n = self.nodes[weight.0].shape()[0];
                    let dw = self.nodes[weight.0].data().to_vec();
                    let dx = self.nodes[input.0].data().to_vec();
                    {
                        let gw = self.nodes[weight.0].grad_mut();
                        for i in 0..n {
                            let xi = dx[i];
                            if xi == S::zero() {
                                continue;
                            }
                            let row = &mut gw[i * n..(i + 1) * n];
                            for j in 0..n {
                                row[j] += xi * g[j];
                            }
                        }
                    }
                    let gx = self.nodes[input.0].grad_mut();
                    for i in 0..n {
                        let row = &dw[i * n..(i + 1) * n];
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc += row[j] * g[j];
                        }
                        gx[i] += acc;
                    }
                }
                Record::Concat { inputs } => {
                    let inputs = inputs.clone();
                    let mut offset = 0;
                    for v in inputs {
                        let len = self.nodes[v.0].len();
                        let gi = self.nodes[v.0].grad_mut();
                        for i in 0..len {
                            gi[i] += g[offset + i];
                        }
                        offset += len;
                    }
                }
                Record::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (gi, gv) in self.nodes[a.0].grad_mut().iter_mut().zip(&g) {
                        *gi += *gv;
                    }
                    for (gi, gv) in self.nodes[b.0].grad_mut().iter_mut().zip(&g) {
                        *gi += *gv;
                    }
                }
                Record::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    for (gi, gv) in self.nodes[a.0].grad_mut().iter_mut().zip(&g) {
                        *gi += *gv;
                    }
                    for (gi, gv) in self.nodes[b.0].grad_mut().iter_mut().zip(&g) {
                        *gi -= *gv;
                    }
                }
                Record::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    for (gi, gv) in self.nodes[input.0].grad_mut().iter_mut().zip(&g) {
                        *gi += *gv * factor;
                    }
                }
                Record::Sum { input } => {
                    let input = *input;
                    let gv = g[0];
                    for gi in self.nodes[input.0].grad_mut() {
                        *gi += gv;
                    }
                }
                Record::L2Norm { input, norm } => {
                    let (input, norm) = (*input, *norm);
                    if norm == S::zero() {
                        continue; // subgradient 0 at the origin
                    }
                    let gv = g[0];
                    let di = self.nodes[input.0].data().to_vec();
                    let gi = self.nodes[input.0].grad_mut();
                    for i in 0..di.len() {
                        gi[i] += gv * di[i] / norm;
                    }
                }
                Record::L2Normalize { input, norm } => {
                    let (input, norm) = (*input, *norm);
                    let di = self.nodes[input.0].data().to_vec();
                    let mut dot = S::zero();
                    for i in 0..di.len() {
                        dot += di[i] / norm * g[i];
                    }
                    let gi = self.nodes[input.0].grad_mut();
                    for i in 0..di.len() {
                        gi[i] += (g[i] - di[i] / norm * dot) / norm;
                    }
                }
                Record::OrthPenalty { weight, lambda, residual } => {
                    let (weight, lambda) = (*weight, *lambda);
                    let residual = residual.clone();
                    let n = self.nodes[weight.0].shape()[0];
                    let dw = self.nodes[weight.0].data().to_vec();
                    let gv = g[0];
                    // d/dW (λ/2)‖WWᵀ−I‖²_F = 2λ(WWᵀ−I)W
                    let coeff = S::from_f64(2.0) * lambda * gv;
                    let gw = self.nodes[weight.0].grad_mut();
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc = S::zero();
                            for p in 0..n {
                                acc += residual[i * n + p] * dw[p * n + j];
                            }
                            gw[i * n + j] += coeff * acc;
                        }
                    }
                }
                Record::SoftmaxCe { logits, probs, label } => {
                    let (logits, label) = (*logits, *label);
                    let probs = probs.clone();
                    let gv = g[0];
                    let gl = self.nodes[logits.0].grad_mut();
                    for i in 0..probs.len() {
                        let delta = if i == label { S::one() } else { S::zero() };
                        gl[i] += gv * (probs[i] - delta);
                    }
                }
            }
        }
    }
}

/// Worst relative error between the analytic gradient of `f` and a central
/// finite-difference estimate, coordinate by coordinate.
///
/// `f` must build a scalar-valued graph from a single leaf. The relative
/// error denominator is max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<S, F>(f: F, input: &Tensor<S>, eps: S) -> S
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Var,
{
    assert!(eps > S::zero());
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(input);
        let out = f(&mut g, x);
        g.backward(out);
        g.grad(x).to_vec()
    };
    let eval = |t: &Tensor<S>| -> S {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let out = f(&mut g, x);
        g.scalar_value(out)
    };
    let mut worst = S::zero();
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (S::from_f64(2.0) * eps);
        let denom = analytic[i]
            .abs()
            .max(numeric.abs())
            .max(S::from_f64(1e-8));
        let err = (analytic[i] - numeric).abs() / denom;
        worst = worst.max(err);
    }
    worst
}
