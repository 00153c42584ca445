//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live in
//! a borrowed [`ParamStore`] and occupy the first `store.len()` slots of the
//! tape, so `ParamId(i)` and `Var(i)` name the same value. Matmul-type nodes
//! increment the graph's [`FlopCounter`] under a caller-supplied label.

use std::sync::Arc;

use super::ops::{self, gemm_into};
use super::{FlopCounter, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Param,
    Leaf,
    Linear { x: Var, w: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, s: T },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu { x: Var },
    Rope { x: Var, cos: Arc<Tensor<T>>, sin: Arc<Tensor<T>> },
    KronCompose { spatial: Var, spectral: Var, sign: T },
    Transpose01 { x: Var },
    Reshape { x: Var },
    Gather { sources: Vec<Var>, picks: Vec<(u32, u32)> },
    Sum { x: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Rope { .. } => "rope",
            Op::KronCompose { .. } => "kron_compose",
            Op::Transpose01 { .. } => "transpose01",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    flops: FlopCounter,
    compose_sign: T,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph whose first `store.len()` variables are the store's parameters.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        let nodes = (0..store.len())
            .map(|_| Node {
                value: None,
                op: Op::Param,
                needs_grad: true,
            })
            .collect();
        Self {
            params: Some(store),
            nodes,
            flops: FlopCounter::new(),
            compose_sign: T::one(),
        }
    }

    /// A graph without parameters.
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            flops: FlopCounter::new(),
            compose_sign: T::one(),
        }
    }

    /// Mutation fixture: negates every Kronecker composition on this graph.
    /// Used by the verification suite to prove the equivalence check can fail.
    #[doc(hidden)]
    pub fn inject_compose_sign_flip(&mut self) {
        self.compose_sign = -T::one();
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn take_flops(&mut self) -> FlopCounter {
        std::mem::take(&mut self.flops)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, id: ParamId) -> Var {
        let store = self.params.expect("graph has no parameter store");
        assert!(id.0 < store.len(), "parameter id out of range");
        Var(id.0)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.value {
            Some(t) => t,
            None => self
                .params
                .expect("parameter node without store")
                .get(ParamId(v.0)),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    /// A leaf whose gradient is retained by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {} (shape {:?})",
                op.name(),
                value.shape()
            )));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `x[..., k] * w[k, n] -> [..., n]`.
    pub fn linear(&mut self, x: Var, w: Var, label: &str) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || wv.shape()[0] != xv.width() {
            return Err(Error::dim(format!(
                "linear: {:?} x {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_into(m, k, n, xv.data(), false, wv.data(), false, &mut out, T::zero());
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.flops.add_matmul(label, m, k, n);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Linear { x, w }, &[x, w])
    }

    /// Batched product `[B, m, k] * [B, k, n]`, or `[B, m, k] * [B, n, k]^T`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, label: &str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k) = ops::dims3(av, "bmm lhs")?;
        let (batch_b, b1, b2) = ops::dims3(bv, "bmm rhs")?;
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if batch != batch_b || k != kb {
            return Err(Error::dim(format!(
                "bmm: {:?} x {:?} (trans_b = {trans_b})",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_into(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        self.flops.add_matmul(label, batch * m, k, n);
        let t = Tensor::new(vec![batch, m, n], out)?;
        self.push(t, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y)?;
        self.push(t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, &[a, b])
    }

    /// Adds a `[n]` bias to every last-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let w = xv.width();
        if bv.len() != w {
            return Err(Error::dim(format!(
                "add_bias: width {w} vs bias {:?}",
                bv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(w) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale { x, s }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = ops::softmax_rows(self.value(x))?;
        self.push(t, Op::Softmax { x }, &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let w = xv.width();
        if gv.len() != w || bv.len() != w {
            return Err(Error::dim(format!(
                "layer_norm: width {w}, gamma {:?}, beta {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let wt = T::from_f64(w as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(w) {
            let mean = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[i] + bv.data()[i]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(ops::gelu);
        self.push(t, Op::Gelu { x }, &[x])
    }

    /// Rotates consecutive feature pairs of `x[..., R, w]` by per-row angles
    /// given as `cos`/`sin` tables of shape `[R, w/2]`.
    pub fn rope(&mut self, x: Var, cos: Arc<Tensor<T>>, sin: Arc<Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        let w = xv.width();
        if w % 2 != 0 {
            return Err(Error::dim(format!("rope: odd feature width {w}")));
        }
        if cos.shape() != sin.shape()
            || cos.rank() != 2
            || cos.width() * 2 != w
            || xv.rows() % cos.rows() != 0
        {
            return Err(Error::dim(format!(
                "rope: input {:?} incompatible with phase table {:?}",
                xv.shape(),
                cos.shape()
            )));
        }
        let data = ops::rotate_rows(xv.data(), w, &cos, &sin, false);
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Rope { x, cos, sin }, &[x])
    }

    /// `[H, Ns, d1] (x) [H, Nc, d2] -> [Ns, Nc, H*d1*d2]`, spatial-major
    /// feature order within each head.
    pub fn kron_compose(&mut self, spatial: Var, spectral: Var, label: &str) -> Result<Var> {
        let sign = self.compose_sign;
        let t = ops::kron_compose_kernel(self.value(spatial), self.value(spectral), sign)?;
        let [ns, nc, width] = t.shape() else {
            unreachable!()
        };
        self.flops.add(label, 2 * (*ns as u64) * (*nc as u64) * (*width as u64));
        self.push(
            t,
            Op::KronCompose {
                spatial,
                spectral,
                sign,
            },
            &[spatial, spectral],
        )
    }

    /// Swaps the first two axes of a 3-D tensor.
    pub fn transpose01(&mut self, x: Var) -> Result<Var> {
        let t = transpose01(self.value(x))?;
        self.push(t, Op::Transpose01 { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x }, &[x])
    }

    /// Assembles rows taken from several sources of equal width. Each pick is
    /// `(source index, row index)` where rows are last-axis slices. The result
    /// has shape `[picks.len(), width]`.
    pub fn gather(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let Some(&first) = sources.first() else {
            return Err(Error::dim("gather without sources"));
        };
        let w = self.value(first).width();
        if sources.iter().any(|&s| self.value(s).width() != w) {
            return Err(Error::dim("gather sources differ in width"));
        }
        if picks.is_empty() {
            return Err(Error::dim("gather with no rows"));
        }
        let mut data = Vec::with_capacity(picks.len() * w);
        for &(s, r) in picks {
            let src = self.value(*sources.get(s).ok_or_else(|| {
                Error::dim(format!("gather source {s} out of range"))
            })?);
            if r >= src.rows() {
                return Err(Error::dim(format!(
                    "gather row {r} out of range for {:?}",
                    src.shape()
                )));
            }
            data.extend_from_slice(src.row(r));
        }
        let t = Tensor::new(vec![picks.len(), w], data)?;
        let picks = picks.iter().map(|&(s, r)| (s as u32, r as u32)).collect();
        self.push(
            t,
            Op::Gather {
                sources: sources.to_vec(),
                picks,
            },
            sources,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x }, &[x])
    }

    /// Reverse pass from a single-element output. Gradients of intermediate
    /// nodes are released once propagated; leaves and parameters are kept.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out).to_vec(), T::one())?);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Param | Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Param | Op::Leaf => {}
            &Op::Linear { x, w } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.wants(x) {
                    let mut dx = vec![T::zero(); m * k];
                    gemm_into(m, n, k, gd, false, wv.data(), true, &mut dx, T::zero());
                    self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm_into(k, m, n, xv.data(), true, gd, false, &mut dw, T::zero());
                    self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            &Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, k) = ops::dims3(av, "bmm lhs")?;
                let n = g.shape()[2];
                let (sa, sb, sg) = (m * k, k * n, m * n);
                if self.wants(a) {
                    let mut da = vec![T::zero(); batch * sa];
                    for t in 0..batch {
                        // trans_b: dA = dC * B with B stored [n, k]; else dA = dC * B^T.
                        gemm_into(
                            m,
                            n,
                            k,
                            &gd[t * sg..(t + 1) * sg],
                            false,
                            &bv.data()[t * sb..(t + 1) * sb],
                            !trans_b,
                            &mut da[t * sa..(t + 1) * sa],
                            T::zero(),
                        );
                    }
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); batch * sb];
                    for t in 0..batch {
                        let (ga, gg) = (&av.data()[t * sa..(t + 1) * sa], &gd[t * sg..(t + 1) * sg]);
                        let dst = &mut db[t * sb..(t + 1) * sb];
                        if trans_b {
                            // dB[n, k] = dC^T * A
                            gemm_into(n, m, k, gg, true, ga, false, dst, T::zero());
                        } else {
                            // dB[k, n] = A^T * dC
                            gemm_into(k, m, n, ga, true, gg, false, dst, T::zero());
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let d = zip(gd, self.value(b).data(), |x, y| x * y);
                    self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.wants(b) {
                    let d = zip(gd, self.value(a).data(), |x, y| x * y);
                    self.accumulate(grads, b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            &Op::AddBias { x, bias } => {
                self.accumulate(grads, x, g.clone());
                if self.wants(bias) {
                    let bv = self.value(bias);
                    let mut db = vec![T::zero(); bv.len()];
                    for row in gd.chunks(bv.len()) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    self.accumulate(grads, bias, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            &Op::Scale { x, s } => {
                self.accumulate(grads, x, g.map(|v| v * s));
            }
            &Op::Softmax { x } => {
                let y = node.value.as_ref().expect("softmax output retained");
                let w = y.width();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(w).zip(gd.chunks(w)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let gv = self.value(gamma);
                let w = gv.len();
                let wt = T::from_f64(w as f64);
                if self.wants(gamma) || self.wants(beta) {
                    let mut dg = vec![T::zero(); w];
                    let mut db = vec![T::zero(); w];
                    for (hr, gr) in xhat.chunks(w).zip(gd.chunks(w)) {
                        for j in 0..w {
                            dg[j] = dg[j] + gr[j] * hr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    self.accumulate(grads, gamma, Tensor::new(gv.shape().to_vec(), dg)?);
                    let bshape = self.value(beta).shape().to_vec();
                    self.accumulate(grads, beta, Tensor::new(bshape, db)?);
                }
                if self.wants(x) {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for ((hr, gr), &is) in xhat.chunks(w).zip(gd.chunks(w)).zip(inv_std) {
                        let dh: Vec<T> = gr.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        for j in 0..w {
                            dx.push(is / wt * (wt * dh[j] - sum_dh - hr[j] * sum_dh_h));
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            &Op::Gelu { x } => {
                let d = zip(gd, self.value(x).data(), |gv, xv| gv * ops::gelu_grad(xv));
                self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Rope { x, cos, sin } => {
                let d = ops::rotate_rows(gd, g.width(), cos, sin, true);
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            &Op::KronCompose {
                spatial,
                spectral,
                sign,
            } => {
                let (sv, cv) = (self.value(spatial), self.value(spectral));
                let (heads, ns, d1) = ops::dims3(sv, "spatial factor")?;
                let (_, nc, d2) = ops::dims3(cv, "spectral factor")?;
                let hd = d1 * d2;
                let width = heads * hd;
                let mut ds = vec![T::zero(); sv.len()];
                let mut dc = vec![T::zero(); cv.len()];
                for n in 0..ns {
                    for c in 0..nc {
                        let base = (n * nc + c) * width;
                        for h in 0..heads {
                            let s_off = (h * ns + n) * d1;
                            let c_off = (h * nc + c) * d2;
                            for i in 0..d1 {
                                let grow = &gd[base + h * hd + i * d2..base + h * hd + (i + 1) * d2];
                                let mut acc = T::zero();
                                for j in 0..d2 {
                                    acc = acc + grow[j] * cv.data()[c_off + j];
                                    dc[c_off + j] =
                                        dc[c_off + j] + sign * grow[j] * sv.data()[s_off + i];
                                }
                                ds[s_off + i] = ds[s_off + i] + sign * acc;
                            }
                        }
                    }
                }
                self.accumulate(grads, spatial, Tensor::new(sv.shape().to_vec(), ds)?);
                self.accumulate(grads, spectral, Tensor::new(cv.shape().to_vec(), dc)?);
            }
            &Op::Transpose01 { x } => {
                self.accumulate(grads, x, transpose01(g)?);
            }
            &Op::Reshape { x } => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.clone().reshape(shape)?);
            }
            Op::Gather { sources, picks } => {
                let w = g.width();
                let mut acc: Vec<Option<Vec<T>>> = sources
                    .iter()
                    .map(|&s| self.wants(s).then(|| vec![T::zero(); self.value(s).len()]))
                    .collect();
                for (k, &(s, r)) in picks.iter().enumerate() {
                    if let Some(buf) = &mut acc[s as usize] {
                        let r = r as usize;
                        for (o, &v) in buf[r * w..(r + 1) * w].iter_mut().zip(&gd[k * w..(k + 1) * w]) {
                            *o = *o + v;
                        }
                    }
                }
                for (&s, buf) in sources.iter().zip(acc) {
                    if let Some(buf) = buf {
                        let shape = self.value(s).shape().to_vec();
                        self.accumulate(grads, s, Tensor::new(shape, buf)?);
                    }
                }
            }
            &Op::Sum { x } => {
                let xv = self.value(x);
                self.accumulate(grads, x, Tensor::full(xv.shape().to_vec(), gd[0])?);
            }
        }
        Ok(())
    }
}

fn zip<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose01<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b, c) = ops::dims3(t, "transpose01 input")?;
    let mut out = Vec::with_capacity(t.len());
    for j in 0..b {
        for i in 0..a {
            out.extend_from_slice(&t.data()[(i * b + j) * c..(i * b + j + 1) * c]);
        }
    }
    Tensor::new(vec![b, a, c], out)
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in store order; unreached parameters get `None`.
    pub fn into_param_grads(mut self, store_len: usize) -> Vec<Option<Tensor<T>>> {
        self.grads.truncate(store_len);
        self.grads
    }
}
