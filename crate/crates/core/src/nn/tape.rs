//! Reverse-mode differentiation tape.
//!
//! Every differentiable op appends a node holding its output value and the
//! information needed to push gradients back to its inputs. `backward` walks
//! the nodes in exact reverse order of execution, so each node is visited
//! once and only after all of its consumers.

use super::conv::{conv2d_backward, depthwise_backward};
use super::losses::{bce_backward, line_err_backward, LineErrMode};
use super::norm::{bn_infer_backward, bn_train_backward};
use super::param::ParamId;
use super::{NnError, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
    },
    BnTrain {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BnInfer {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu6(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Bias(Var, Var),
    Upsample2x(Var),
    Concat(Var, Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        denom: T,
    },
    Bce {
        logits: Var,
        target: Vec<T>,
        weight: Vec<T>,
        denom: T,
    },
    LineErr {
        pred: Var,
        target: Vec<T>,
        points: usize,
        mode: LineErrMode,
    },
    WeightedSum(Vec<(Var, T)>),
    SumSquares(Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Record of executed operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Free variable that receives a gradient but is not a model parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter node, zero-filled for parameters the
    /// loss does not reach.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Vec<T>)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => Some((
                id,
                self.grads
                    .get(i)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![T::zero(); n.value.len()]),
            )),
            _ => None,
        })
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::from_vec(src.shape(), src.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.needs(x);
        self.push(out, op, rg)
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let six = T::of(6.0);
        self.unary(x, Op::Relu6(x), |v| v.max(T::zero()).min(six))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NnError::Shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Add a per-channel bias to an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(b).len() != c {
            return Err(NnError::Shape(format!(
                "bias of {} values for {c} channels",
                self.value(b).len()
            )));
        }
        let p = h * w;
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        debug_assert_eq!(out.len(), n * c * p);
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::Bias(x, b), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var, NnError> {
        let src = self.value(x);
        let (n, c, h, w) = src.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let s = src.data();
        let o = out.data_mut();
        for plane in 0..n * c {
            let sp = &s[plane * h * w..(plane + 1) * h * w];
            let op = &mut o[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let row = &sp[(oy / 2) * w..(oy / 2 + 1) * w];
                for (ox, v) in op[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *v = row[ox / 2];
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(NnError::Shape(format!(
                "concat of [{na},{ca},{ha},{wa}] and [{nb},{cb},{hb},{wb}]"
            )));
        }
        let p = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * p);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * p..(n + 1) * ca * p]);
            data.extend_from_slice(&db[n * cb * p..(n + 1) * cb * p]);
        }
        let out = Tensor::from_vec(&[na, ca + cb, ha, wa], data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Flat-index gather into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, NnError> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(NnError::Shape(format!(
                "gather index {bad} out of {}",
                src.len()
            )));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(&[idx.len()], data)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Gather { x, idx }, rg))
    }

    /// `Σ kᵢ·vᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NnError> {
        let mut total = T::zero();
        for &(v, k) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(NnError::NotScalar(val.shape().to_vec()));
            }
            total += T::of(k) * val.data()[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        let terms = terms.iter().map(|&(v, k)| (v, T::of(k))).collect();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms), rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Populate gradients of `loss` with respect to every node that
    /// requires one. Previous gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(NnError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, stride } => {
                let (gx, gw) = split_two(grads, *x, *w, self);
                conv2d_backward(self.value(*x), self.value(*w), *stride, g, gx, gw);
            }
            Op::Depthwise { x, w, stride } => {
                let (gx, gw) = split_two(grads, *x, *w, self);
                depthwise_backward(self.value(*x), self.value(*w), *stride, g, gx, gw);
            }
            Op::BnTrain {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (gx, gs, gb) = split_three(grads, *x, *scale, *shift, self);
                bn_train_backward(
                    self.value(*x),
                    self.value(*scale).data(),
                    xhat,
                    inv_std,
                    g,
                    gx,
                    gs,
                    gb,
                );
            }
            Op::BnInfer {
                x,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let (gx, gs, gb) = split_three(grads, *x, *scale, *shift, self);
                bn_infer_backward(
                    self.value(*x),
                    self.value(*scale).data(),
                    mean,
                    inv_std,
                    g,
                    gx,
                    gs,
                    gb,
                );
            }
            Op::Relu6(x) => {
                let six = T::of(6.0);
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() && xi < six {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        for (d, &gi) in gv.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Bias(x, b) => {
                let (_, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let p = h * w;
                let (gx, gb) = split_two(grads, *x, *b, self);
                if let Some(gx) = gx {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if let Some(gb) = gb {
                    for (i, chunk) in g.chunks(p).enumerate() {
                        gb[i % c] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for plane in 0..n * c {
                        let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dp = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dp[(oy / 2) * w + ox / 2] += gp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("rank 4");
                let cb = self.value(*b).dims4().expect("rank 4").1;
                let p = h * w;
                let ct = ca + cb;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for img in 0..n {
                        let src = &g[img * ct * p..img * ct * p + ca * p];
                        for (d, &s) in ga[img * ca * p..(img + 1) * ca * p].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for img in 0..n {
                        let src = &g[img * ct * p + ca * p..(img + 1) * ct * p];
                        for (d, &s) in gb[img * cb * p..(img + 1) * cb * p].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (&j, &gi) in idx.iter().zip(g) {
                        gx[j] += gi;
                    }
                }
            }
            Op::Mse {
                pred,
                target,
                mask,
                denom,
            } => {
                let p = self.value(*pred).data();
                let two = T::of(2.0);
                if let Some(gp) = self.grad_slot(grads, *pred) {
                    for i in 0..p.len() {
                        gp[i] += g[0] * two * mask[i] * (p[i] - target[i]) / *denom;
                    }
                }
            }
            Op::Bce {
                logits,
                target,
                weight,
                denom,
            } => {
                let z = self.value(*logits).data();
                if let Some(gz) = self.grad_slot(grads, *logits) {
                    bce_backward(z, target, weight, *denom, g[0], gz);
                }
            }
            Op::LineErr {
                pred,
                target,
                points,
                mode,
            } => {
                let p = self.value(*pred).data();
                if let Some(gp) = self.grad_slot(grads, *pred) {
                    line_err_backward(p, target, *points, *mode, g[0], gp);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, k) in terms {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        gv[0] += k * g[0];
                    }
                }
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x).data();
                let two = T::of(2.0);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (d, &xi) in gx.iter_mut().zip(xv) {
                        *d += two * xi * g[0];
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice(),
        )
    }

    /// Fingerprint of which side of every non-differentiable point each
    /// piecewise op currently sits on. Finite-difference checks compare
    /// fingerprints to detect steps that cross a kink.
    pub fn kink_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu6(x) => {
                    let six = T::of(6.0);
                    sig.extend(self.value(*x).data().iter().map(|&v| {
                        if v <= T::zero() {
                            0
                        } else if v >= six {
                            2
                        } else {
                            1
                        }
                    }));
                }
                Op::LineErr {
                    pred,
                    target,
                    mode,
                    ..
                } => {
                    let p = self.value(*pred).data();
                    match mode {
                        LineErrMode::Euclidean => sig.extend(p.chunks(2).zip(target.chunks(2)).map(
                            |(a, b)| u8::from(a[0] == b[0] && a[1] == b[1]),
                        )),
                        LineErrMode::L1 => {
                            sig.extend(p.iter().zip(target).map(|(a, b)| u8::from(a > b)))
                        }
                        LineErrMode::Squared => {}
                    }
                }
                _ => {}
            }
        }
        sig
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Two distinct gradient slots (either may be absent).
fn split_two<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    a: Var,
    b: Var,
    tape: &Tape<T>,
) -> (Option<&'g mut [T]>, Option<&'g mut [T]>) {
    assert_ne!(a, b);
    for v in [a, b] {
        if tape.needs(v) && grads[v.0].is_none() {
            grads[v.0] = Some(vec![T::zero(); tape.node(v).value.len()]);
        }
    }
    let (lo, hi, swapped) = if a.0 < b.0 {
        (a, b, false)
    } else {
        (b, a, true)
    };
    let (left, right) = grads.split_at_mut(hi.0);
    let glo = if tape.needs(lo) {
        left[lo.0].as_deref_mut()
    } else {
        None
    };
    let ghi = if tape.needs(hi) {
        right[0].as_deref_mut()
    } else {
        None
    };
    if swapped {
        (ghi, glo)
    } else {
        (glo, ghi)
    }
}

type Slot<'g, T> = Option<&'g mut [T]>;

fn split_three<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    a: Var,
    b: Var,
    c: Var,
    tape: &Tape<T>,
) -> (Slot<'g, T>, Slot<'g, T>, Slot<'g, T>) {
    for v in [a, b, c] {
        if tape.needs(v) && grads[v.0].is_none() {
            grads[v.0] = Some(vec![T::zero(); tape.node(v).value.len()]);
        }
    }
    let mut slots: [Slot<'g, T>; 3] = [None, None, None];
    let wanted = [a.0, b.0, c.0];
    assert!(wanted[0] != wanted[1] && wanted[1] != wanted[2] && wanted[0] != wanted[2]);
    for (idx, g) in grads.iter_mut().enumerate() {
        if let Some(pos) = wanted.iter().position(|&w| w == idx) {
            if tape.nodes[idx].requires_grad {
                slots[pos] = g.as_deref_mut();
            }
        }
    }
    let [x, y, z] = slots;
    (x, y, z)
}
