//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its variables. Nodes are
//! appended in evaluation order, so replaying them backwards visits each node
//! after all of its consumers. Calling [`Tape::backward`] on a scalar produces
//! [`Gradients`] for every node, which can be written into a [`ParamStore`].

pub(crate) mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::params::ParamStore;
use crate::tensor::{Element, Tensor, TensorError};
use kernels::{AxisMap, Geom, KernelRole};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Softmax over the channel axis at every spatial location.
    Softmax,
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

struct ConvRecord {
    x: usize,
    k: usize,
    b: Option<usize>,
    xg: Geom,
    og: Geom,
    kdims: [usize; 3],
    maps: [AxisMap; 3],
    transposed: bool,
}

enum Op<T: Element> {
    Leaf,
    Conv(Box<ConvRecord>),
    Pool {
        x: usize,
        xg: Geom,
        og: Geom,
        window: [usize; 3],
        argmax: Option<Vec<usize>>,
    },
    AvgPoolSame {
        x: usize,
        xg: Geom,
        maps: Box<[AxisMap; 3]>,
    },
    Relu(usize),
    Softmax(usize),
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Concat {
        xs: Vec<usize>,
        widths: Vec<usize>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of operations and their saved values.
pub struct Tape<T: Element> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(usize, usize)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, what: &'static str) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(what));
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("variable of this tape")].value
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Records the current value of a named parameter.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, TensorError> {
        let index = store
            .index_of(name)
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown parameter {name}")))?;
        let v = self.leaf(store.get(index).value.clone());
        self.params.push((v.id, index));
        Ok(v)
    }

    fn conv_common(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        transposed: bool,
    ) -> Result<Var, TensorError> {
        let (xi, ki) = (self.check(x)?, self.check(k)?);
        let bi = b.map(|b| self.check(b)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ks = self.nodes[ki].value.shape();
        let (xg, rank) = Geom::of(xs)?;
        if ks.len() != rank + 2 {
            return Err(TensorError::RankMismatch(format!(
                "kernel {ks:?} for input {xs:?}"
            )));
        }
        if ks[rank] != xg.c {
            return Err(TensorError::ChannelMismatch {
                expected: xg.c,
                got: ks[rank],
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("stride must be positive".into()));
        }
        let out_c = ks[rank + 1];
        if let Some(bi) = bi {
            let bs = self.nodes[bi].value.shape();
            if bs != [out_c] {
                return Err(TensorError::ShapeMismatch(format!(
                    "bias {bs:?} for {out_c} output channels"
                )));
            }
        }
        let kdims = kernels::lift3(&ks[..rank], 1);
        let strides = kernels::lift3(&vec![stride; rank], 1);
        let maps = [0, 1, 2].map(|a| {
            if transposed {
                AxisMap::conv_transpose(xg.sp[a], kdims[a], strides[a])
            } else {
                AxisMap::conv(xg.sp[a], kdims[a], strides[a])
            }
        });
        let x_data = self.nodes[xi].value.data();
        let k_data = self.nodes[ki].value.data();
        let bias = bi.map(|bi| self.nodes[bi].value.data());
        let (out, og) = kernels::gather(x_data, xg, &maps, k_data, kdims, KernelRole::Forward, out_c, bias);
        let value = Tensor::new(og.shape(rank), out)?;
        let rec = ConvRecord {
            x: xi,
            k: ki,
            b: bi,
            xg,
            og,
            kdims,
            maps,
            transposed,
        };
        self.push(value, Op::Conv(Box::new(rec)), "convolution")
    }

    /// Zero-padded "same" cross-correlation of `x [b, s.., c_in]` with
    /// `kernel [f.., c_in, c_out]` plus an optional per-channel bias.
    pub fn conv(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var, TensorError> {
        self.conv_common(x, kernel, bias, stride, false)
    }

    /// Transposed convolution; every spatial extent is multiplied by `stride`.
    pub fn conv_transpose(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        self.conv_common(x, kernel, bias, stride, true)
    }

    /// Non-overlapping pooling with the given window on every spatial axis.
    pub fn pool(&mut self, x: Var, window: usize, mode: PoolMode) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let (xg, rank) = Geom::of(self.nodes[xi].value.shape())?;
        if window == 0 {
            return Err(TensorError::InvalidArgument("pool window must be positive".into()));
        }
        let w = kernels::lift3(&vec![window; rank], 1);
        for a in 0..3 {
            if xg.sp[a] % w[a] != 0 {
                return Err(TensorError::NotDivisible {
                    axis: a + rank - 3,
                    extent: xg.sp[a],
                    window,
                });
            }
        }
        let (out, og, arg) = kernels::pool(self.nodes[xi].value.data(), xg, w, mode == PoolMode::Max);
        let value = Tensor::new(og.shape(rank), out)?;
        let op = Op::Pool {
            x: xi,
            xg,
            og,
            window: w,
            argmax: (mode == PoolMode::Max).then_some(arg),
        };
        self.push(value, op, "pooling")
    }

    /// Stride-1 average pooling with a "same" window of `window` per axis.
    pub fn avg_pool_same(&mut self, x: Var, window: usize) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let (xg, rank) = Geom::of(self.nodes[xi].value.shape())?;
        if window == 0 {
            return Err(TensorError::InvalidArgument("pool window must be positive".into()));
        }
        let w = kernels::lift3(&vec![window; rank], 1);
        let maps = [0, 1, 2].map(|a| AxisMap::window_same(xg.sp[a], w[a]));
        let out = kernels::avg_pool_same(self.nodes[xi].value.data(), xg, &maps);
        let value = Tensor::new(xg.shape(rank), out)?;
        self.push(
            value,
            Op::AvgPoolSame {
                x: xi,
                xg,
                maps: Box::new(maps),
            },
            "average pooling",
        )
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Softmax => self.softmax(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(xi), "relu")
    }

    /// Max-subtracted softmax over the trailing channel axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let src = &self.nodes[xi].value;
        let c = src.channels();
        let mut out = src.data().to_vec();
        for px in out.chunks_exact_mut(c) {
            let m = px.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in px.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in px.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(xi), "softmax")
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Identity
    /// outside training or at rate zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.nodes[xi].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = &self.nodes[xi].value;
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x: xi, mask }, "dropout")
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let ids = xs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>, _>>()?;
        let first = ids
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of an empty list".into()))?;
        if ids.len() == 1 {
            return Ok(xs[0]);
        }
        let base = self.nodes[*first].value.shape().to_vec();
        let lead = &base[..base.len() - 1];
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.len() != base.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat {base:?} with {s:?}"
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let positions: usize = lead.iter().product();
        let mut data = Vec::with_capacity(positions * total);
        for p in 0..positions {
            for (&i, &w) in ids.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[p * w..(p + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Concat { xs: ids, widths }, "concat")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.zip_map(&self.nodes[bi].value, |x, y| x + y)?;
        self.push(value, Op::Add(ai, bi), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ai].value.zip_map(&self.nodes[bi].value, |x, y| x * y)?;
        self.push(value, Op::Mul(ai, bi), "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let value = self.nodes[xi].value.map(|v| v * c);
        self.push(value, Op::Scale(xi, c), "scale")
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let value = Tensor::scalar(self.nodes[xi].value.sum());
        self.push(value, Op::Sum(xi), "sum")
    }

    /// Records an operation whose value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var, TensorError> {
        let ids = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>, _>>()?;
        let name = op.name();
        self.push(output, Op::Custom { inputs: ids, op }, name)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::ones(lv.shape()));
        for id in (0..=li).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv(rec) => {
                let x = val(rec.x);
                let k = val(rec.k);
                let rank = x.rank() - 2;
                let (dx, dk) = if rec.transposed {
                    let back = [0, 1, 2].map(|a| {
                        AxisMap::conv(rec.og.sp[a], rec.kdims[a], rec.og.sp[a] / rec.xg.sp[a])
                    });
                    let (dx, _) = kernels::gather(
                        g.data(),
                        rec.og,
                        &back,
                        k.data(),
                        rec.kdims,
                        KernelRole::Adjoint,
                        rec.xg.c,
                        None,
                    );
                    let dk = kernels::kernel_grad(x.data(), rec.xg, g.data(), rec.og, &rec.maps, rec.kdims);
                    (dx, dk)
                } else {
                    let back = [0, 1, 2].map(|a| rec.maps[a].invert(rec.xg.sp[a]));
                    let (dx, _) = kernels::gather(
                        g.data(),
                        rec.og,
                        &back,
                        k.data(),
                        rec.kdims,
                        KernelRole::Adjoint,
                        rec.xg.c,
                        None,
                    );
                    let dk = kernels::kernel_grad(x.data(), rec.xg, g.data(), rec.og, &rec.maps, rec.kdims);
                    (dx, dk)
                };
                accumulate(grads, rec.x, Tensor::new(rec.xg.shape(rank), dx).expect("shape"));
                accumulate(grads, rec.k, Tensor::new(k.shape().to_vec(), dk).expect("shape"));
                if let Some(b) = rec.b {
                    let db = kernels::channel_sum(g.data(), rec.og);
                    accumulate(grads, b, Tensor::new(vec![rec.og.c], db).expect("shape"));
                }
            }
            Op::Pool {
                x,
                xg,
                og,
                window,
                argmax,
            } => {
                let dx = match argmax {
                    Some(arg) => {
                        let mut dx = vec![T::zero(); xg.len()];
                        for (&i, &gv) in arg.iter().zip(g.data()) {
                            dx[i] = dx[i] + gv;
                        }
                        dx
                    }
                    None => kernels::avg_pool_backward(g.data(), *og, *xg, *window),
                };
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx).expect("shape"));
            }
            Op::AvgPoolSame { x, xg, maps } => {
                let dx = kernels::avg_pool_same_backward(g.data(), *xg, maps);
                accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx).expect("shape"));
            }
            Op::Relu(x) => {
                let dx = node
                    .value
                    .zip_map(g, |y, gv| if y > T::zero() { gv } else { T::zero() })
                    .expect("shape");
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let c = node.value.channels();
                let mut dx = vec![T::zero(); g.len()];
                for ((s, gv), d) in node
                    .value
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let dot: T = s.iter().zip(gv).map(|(&a, &b)| a * b).sum();
                    for ((d, &sv), &gvv) in d.iter_mut().zip(s).zip(gv) {
                        *d = sv * (gvv - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Concat { xs, widths } => {
                let total: usize = widths.iter().sum();
                let positions = g.len() / total;
                let mut parts: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(w * positions)).collect();
                for p in 0..positions {
                    let mut off = p * total;
                    for (part, &w) in parts.iter_mut().zip(widths) {
                        part.extend_from_slice(&g.data()[off..off + w]);
                        off += w;
                    }
                }
                for (&i, part) in xs.iter().zip(parts) {
                    accumulate(grads, i, Tensor::new(val(i).shape().to_vec(), part).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(val(*b), |gv, bv| gv * bv).expect("shape");
                let db = g.zip_map(val(*a), |gv, av| gv * av).expect("shape");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                for (&i, d) in inputs.iter().zip(op.backward(&ins, &node.value, g)) {
                    if let Some(d) = d {
                        accumulate(grads, i, d);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], id: usize, d: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(d.data()) {
                *e = *e + *v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T: Element> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if unreached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Overwrites every parameter gradient in `store`; parameters not reached
    /// from the loss receive zeros. A parameter read several times on the tape
    /// accumulates all its uses.
    pub fn write_params(&self, store: &mut ParamStore<T>) {
        store.zero_grads();
        for &(node, index) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(index);
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
        }
    }
}
