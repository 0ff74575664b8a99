//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node whose inputs are earlier nodes, so node
//! order is already a topological order. A backward pass walks the tape once
//! in reverse and accumulates gradients for every node that depends on a
//! `requires_grad` leaf.

use crate::error::{Error, Result};
use crate::numeric::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive angular margin applied to the target logit of a hypersphere softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularMargin<T> {
    pub scale: T,
    pub margin: T,
    /// Below `cos(pi - margin)` the margined cosine stops being monotone in the
    /// angle; when set, switch to the linear surrogate `cos - margin * sin(margin)`.
    pub fallback: bool,
}

impl<T: Scalar> AngularMargin<T> {
    /// `(logit, d logit / d cos)` for the target class.
    pub fn target_logit(&self, cos: T) -> (T, T) {
        let (cos_m, sin_m) = (self.margin.cos(), self.margin.sin());
        let threshold = (T::from_f64_lossy(std::f64::consts::PI) - self.margin).cos();
        if self.fallback && cos <= threshold {
            return (self.scale * (cos - self.margin * sin_m), self.scale);
        }
        let sin = (T::one() - cos * cos).max(T::zero()).sqrt();
        let value = self.scale * (cos * cos_m - sin * sin_m);
        let deriv = if sin > T::zero() {
            self.scale * (cos_m + cos * sin_m / sin)
        } else {
            self.scale * cos_m
        };
        (value, deriv)
    }

    pub fn other_logit(&self, cos: T) -> T {
        self.scale * cos
    }

    /// Logits for all classes given cosines and the target index.
    pub fn logits(&self, cosines: &[T], target: usize) -> Vec<T> {
        cosines
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                if j == target {
                    self.target_logit(c).0
                } else {
                    self.other_logit(c)
                }
            })
            .collect()
    }
}

/// Softmax with max-logit subtraction.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    AddN(Vec<Var>),
    Sigmoid(Var),
    Relu(Var),
    Gap(Var),
    L2Normalize(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    Scale(Var, T),
    MaxAll(Var, usize),
    DivScalar(Var, Var, T),
    Clamp(Var, T, T),
    MarginLogits(Var, usize, AngularMargin<T>),
    CrossEntropy(Var, usize, Vec<T>),
    Bce(Var, Vec<T>, T),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed differentiable operations.
#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or `None` when it does not depend on a trainable leaf.
    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Shapes agree, or `b` has a leading extent of 1 and is repeated along axis 0.
fn broadcast_rows(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if a.len() == b.len() && b[0] == 1 && a[1..] == b[1..] {
        return Ok(true);
    }
    Err(Error::dim(op, format!("cannot combine {a:?} with {b:?}")))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                if x == T::zero() {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o = *o + x * y;
                }
            }
        }
        let needs = self.needs(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs)
    }

    fn pointwise2(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = broadcast_rows(name, ta.shape(), tb.shape())?;
        let inner = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[if bcast { i % inner } else { i }]))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        self.push(name, value, op, needs)
    }

    /// Pointwise sum; `b` may broadcast along the leading axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pointwise2("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Pointwise product; `b` may broadcast along the leading axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pointwise2("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Pointwise maximum. Ties route the subgradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pointwise2("max", a, b, |x, y| if y > x { y } else { x }, Op::Max(a, b))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::Argument("add_n of nothing".into()))?;
        let mut acc = self.value(first).clone();
        for &v in &vars[1..] {
            let t = self.value(v);
            if t.shape() != acc.shape() {
                return Err(Error::dim("add_n", format!("{:?} vs {:?}", acc.shape(), t.shape())));
            }
            for (o, &x) in acc.data_mut().iter_mut().zip(t.data()) {
                *o = *o + x;
            }
        }
        let needs = self.needs(vars);
        self.push("add_n", acc, Op::AddN(vars.to_vec()), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(stable_sigmoid);
        let needs = self.needs(&[x]);
        self.push("sigmoid", value, Op::Sigmoid(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(&[x]);
        self.push("relu", value, Op::Relu(x), needs)
    }

    /// Global average pooling of a `C x H x W` map to a length-`C` vector.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::dim("gap", format!("expected C x H x W, got {:?}", t.shape())));
        }
        let c = t.shape()[0];
        let area = T::from_usize(t.row_len()).unwrap();
        let data = (0..c)
            .map(|i| t.row(i).iter().copied().sum::<T>() / area)
            .collect();
        let needs = self.needs(&[x]);
        self.push("gap", Tensor::new(vec![c], data)?, Op::Gap(x), needs)
    }

    /// Unit-normalizes a vector, or each row of a matrix.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() > 2 {
            return Err(Error::dim("l2_normalize", format!("rank {} input", t.rank())));
        }
        let rows = if t.rank() == 1 { 1 } else { t.shape()[0] };
        let width = t.len() / rows;
        let eps = T::from_f64_lossy(super::NORM_EPS);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..rows {
            let row = &t.data()[r * width..(r + 1) * width];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= eps {
                return Err(Error::Degenerate(format!(
                    "l2_normalize: row {r} has norm {norm} <= {eps}"
                )));
            }
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        self.push("l2_normalize", value, Op::L2Normalize(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.needs(&[x]);
        self.push("reshape", value, Op::Reshape(x), needs)
    }

    /// Gathers leading-axis slices in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.rows();
        if rows.is_empty() {
            return Err(Error::Argument("select_rows: empty selection".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Argument(format!("select_rows: row {bad} out of {n}")));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
        let needs = self.needs(&[x]);
        self.push("select_rows", Tensor::new(shape, data)?, Op::SelectRows(x, rows.to_vec()), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.needs(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(&[x]);
        self.push("scale", value, Op::Scale(x, factor), needs)
    }

    /// Largest element, as a one-element tensor. The subgradient goes to the first maximum.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut best = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v > t.data()[best] {
                best = i;
            }
        }
        let value = Tensor::scalar(t.data()[best]);
        let needs = self.needs(&[x]);
        self.push("max_all", value, Op::MaxAll(x, best), needs)
    }

    /// `a / (s + eps)` where `s` is a one-element tensor.
    pub fn div_scalar(&mut self, a: Var, s: Var, eps: T) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("div_scalar", format!("divisor shape {:?}", self.value(s).shape())));
        }
        let d = self.value(s).item() + eps;
        if d == T::zero() {
            return Err(Error::Degenerate("div_scalar: zero divisor".into()));
        }
        let value = self.value(a).map(|v| v / d);
        let needs = self.needs(&[a, s]);
        self.push("div_scalar", value, Op::DivScalar(a, s, eps), needs)
    }

    /// Clamps into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let needs = self.needs(&[x]);
        self.push("clamp", value, Op::Clamp(x, lo, hi), needs)
    }

    /// Hypersphere logits from cosines, with an additive angular margin on `target`.
    pub fn margin_logits(&mut self, cosines: Var, target: usize, margin: AngularMargin<T>) -> Result<Var> {
        let t = self.value(cosines);
        if target >= t.len() {
            return Err(Error::Argument(format!("margin_logits: target {target} of {}", t.len())));
        }
        let value = Tensor::new(vec![t.len()], margin.logits(t.data(), target))?;
        let needs = self.needs(&[cosines]);
        self.push("margin_logits", value, Op::MarginLogits(cosines, target, margin), needs)
    }

    /// Softmax cross-entropy `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::Argument(format!("cross_entropy: target {target} of {}", z.len())));
        }
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let loss = lse - z[target];
        let probs = softmax(z);
        let needs = self.needs(&[logits]);
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy(logits, target, probs), needs)
    }

    /// Summed binary cross-entropy of scores against {0,1} targets, scores clamped to `[eps, 1 - eps]`.
    pub fn binary_cross_entropy(&mut self, scores: Var, targets: &[T], eps: T) -> Result<Var> {
        let p = self.value(scores).data();
        if p.len() != targets.len() {
            return Err(Error::dim(
                "binary_cross_entropy",
                format!("{} scores vs {} targets", p.len(), targets.len()),
            ));
        }
        let one = T::one();
        let loss = p
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.max(eps).min(one - eps);
                -(t * p.ln() + (one - t) * (one - p).ln())
            })
            .sum();
        let needs = self.needs(&[scores]);
        self.push(
            "binary_cross_entropy",
            Tensor::scalar(loss),
            Op::Bce(scores, targets.to_vec(), eps),
            needs,
        )
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.needs_grad => Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let zero = T::zero();
        let one = T::one();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![zero; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = zero;
                            for j in 0..n {
                                s = s + g[i * n + j] * tb.data()[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = ta.data()[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Max(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bcast = ta.shape() != tb.shape();
                let inner = tb.len();
                let bi = |i: usize| if bcast { i % inner } else { i };
                // Local derivatives w.r.t. a and b at flat position i of the output.
                let local = |i: usize| -> (T, T) {
                    let (x, y) = (ta.data()[i], tb.data()[bi(i)]);
                    match &node.op {
                        Op::Add(..) => (one, one),
                        Op::Mul(..) => (y, x),
                        _ => {
                            if y > x {
                                (zero, one)
                            } else {
                                (one, zero)
                            }
                        }
                    }
                };
                acc(*a, &mut |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] = ga[i] + *gi * local(i).0;
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        let j = bi(i);
                        gb[j] = gb[j] + *gi * local(i).1;
                    }
                });
            }
            Op::AddN(vars) => {
                for v in vars {
                    acc(*v, &mut |gv| {
                        for (o, &x) in gv.iter_mut().zip(g) {
                            *o = *o + x;
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * y[i] * (one - y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if xs[i] > zero {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                });
            }
            Op::Gap(x) => {
                let t = self.value(*x);
                let area = t.row_len();
                let inv = one / T::from_usize(area).unwrap();
                acc(*x, &mut |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o = *o + g[i / area] * inv;
                    }
                });
            }
            Op::L2Normalize(x) => {
                let t = self.value(*x);
                let y = node.value.data();
                let rows = if t.rank() == 1 { 1 } else { t.shape()[0] };
                let width = t.len() / rows;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let span = r * width..(r + 1) * width;
                        let norm = t.data()[span.clone()].iter().map(|&v| v * v).sum::<T>().sqrt();
                        let dot: T = span.clone().map(|i| y[i] * g[i]).sum();
                        for i in span {
                            gx[i] = gx[i] + (g[i] - y[i] * dot) / norm;
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o = *o + v;
                }
            }),
            Op::SelectRows(x, rows) => {
                let width = self.value(*x).row_len();
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..width {
                            gx[r * width + j] = gx[r * width + j] + g[k * width + j];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::Scale(x, f) => acc(*x, &mut |gx| {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o = *o + v * *f;
                }
            }),
            Op::MaxAll(x, idx) => acc(*x, &mut |gx| gx[*idx] = gx[*idx] + g[0]),
            Op::DivScalar(a, s, eps) => {
                let d = self.value(*s).item() + *eps;
                let ta = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] / d;
                    }
                });
                acc(*s, &mut |gs| {
                    let dot: T = (0..g.len()).map(|i| g[i] * ta[i]).sum();
                    gs[0] = gs[0] - dot / (d * d);
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xs = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if xs[i] >= *lo && xs[i] <= *hi {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                });
            }
            Op::MarginLogits(x, target, margin) => {
                let cs = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        let d = if i == *target {
                            margin.target_logit(cs[i]).1
                        } else {
                            margin.scale
                        };
                        gx[i] = gx[i] + g[i] * d;
                    }
                });
            }
            Op::CrossEntropy(x, target, probs) => acc(*x, &mut |gx| {
                for (i, &p) in probs.iter().enumerate() {
                    let q = if i == *target { one } else { zero };
                    gx[i] = gx[i] + g[0] * (p - q);
                }
            }),
            Op::Bce(x, targets, eps) => {
                let ps = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..ps.len() {
                        let p = ps[i];
                        if p < *eps || p > one - *eps {
                            continue;
                        }
                        let t = targets[i];
                        gx[i] = gx[i] + g[0] * (-t / p + (one - t) / (one - p));
                    }
                });
            }
        }
    }
}

/// `1 / (1 + e^-x)` evaluated without overflow for large `|x|`.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
