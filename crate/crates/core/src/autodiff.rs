//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] records a small set of matrix operations (linear layers,
//! pointwise nonlinearities, reductions and the fused per-row losses the
//! models need) and replays them backwards. The graph is generic over the
//! [`Scalar`] type; evaluating it with [`Dual`] numbers whose tangents seed a
//! direction `v` on the `w` block gives, in one forward/backward sweep,
//!
//! * `∇_w f` and `∇_λ f` (real parts), and
//! * `∇_w∇_w f · v` and `∇_λ∇_w f · v` (tangent parts),
//!
//! which is everything the reverse hypergradient recursion consumes.
//!
//! Objectives are expressed through [`ScalarFn`], which receives one graph
//! variable per segment of `w` and of `λ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::check_finite;
use crate::scalar::{Dual, Scalar};
use crate::{Error, ParamVector, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Max { x: usize, arg: usize },
    XentRows { logits: usize, labels: Vec<usize> },
    BernoulliRows { logits: usize, targets: Vec<f64> },
    KlRows { mu: usize, log_var: usize },
}

#[derive(Debug, Clone)]
struct Node<S> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    // op-specific forward cache (softmax probabilities, sigmoid means)
    aux: Vec<S>,
    op: Op,
    needs_grad: bool,
}

/// Lower clamp applied to Bernoulli means inside the log-likelihood.
pub const BERNOULLI_CLAMP: f64 = 1e-7;

/// Recorded computation over matrices of `S`.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

#[inline]
fn sigmoid<S: Scalar>(l: S) -> S {
    let one = S::constant(1.0);
    if l.value() >= 0.0 {
        one / (one + (-l).exp())
    } else {
        let e = l.exp();
        e / (one + e)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, aux: Vec<S>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, aux, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    /// A constant input that receives no gradient.
    pub fn input(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("input {rows}x{cols} given {} values", data.len())));
        }
        let value = data.iter().map(|&v| S::constant(v)).collect();
        Ok(self.push(rows, cols, value, Vec::new(), Op::Leaf, false))
    }

    /// A differentiable leaf, optionally carrying a tangent direction.
    pub fn param(&mut self, rows: usize, cols: usize, data: &[f64], tangent: Option<&[f64]>) -> Result<Var> {
        if data.len() != rows * cols || tangent.is_some_and(|t| t.len() != data.len()) {
            return Err(Error::shape(format!("param {rows}x{cols} given {} values", data.len())));
        }
        let value = match tangent {
            Some(t) => data.iter().zip(t).map(|(&v, &d)| S::seeded(v, d)).collect(),
            None => data.iter().map(|&v| S::constant(v)).collect(),
        };
        Ok(self.push(rows, cols, value, Vec::new(), Op::Leaf, true))
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    /// Real parts of a node's value.
    pub fn values_f64(&self, v: Var) -> Vec<f64> {
        self.node(v).value.iter().map(|s| s.value()).collect()
    }

    pub fn scalar(&self, v: Var) -> Result<S> {
        let n = self.node(v);
        if n.rows * n.cols != 1 {
            return Err(Error::shape(format!("expected a scalar, got {}x{}", n.rows, n.cols)));
        }
        Ok(n.value[0])
    }

    /// `x Wᵀ + b` for `x: [n, in]`, `W: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, inp) = self.dims(x);
        let (out, w_in) = self.dims(w);
        if w_in != inp {
            return Err(Error::shape(format!("linear: input width {inp} vs weight {out}x{w_in}")));
        }
        if let Some(b) = b {
            let (br, bc) = self.dims(b);
            if br * bc != out {
                return Err(Error::shape(format!("linear: bias has {} values, need {out}", br * bc)));
            }
        }
        let xv = &self.node(x).value;
        let wv = &self.node(w).value;
        let mut y = vec![S::zero(); n * out];
        for r in 0..n {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wv[o * inp..(o + 1) * inp];
                let mut acc = S::zero();
                for (a, c) in xr.iter().zip(wr) {
                    acc += *a * *c;
                }
                y[r * out + o] = acc;
            }
        }
        if let Some(b) = b {
            let bv = &self.node(b).value;
            for r in 0..n {
                for o in 0..out {
                    y[r * out + o] += bv[o];
                }
            }
        }
        let needs = self.node(x).needs_grad || self.node(w).needs_grad || b.is_some_and(|b| self.node(b).needs_grad);
        Ok(self.push(n, out, y, Vec::new(), Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, needs))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(S) -> S) -> Var {
        let (r, c) = self.dims(x);
        let value = self.node(x).value.iter().map(|&v| f(v)).collect();
        let needs = self.node(x).needs_grad;
        self.push(r, c, value, Vec::new(), op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| if v.value() > 0.0 { v } else { S::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), |v| v.exp())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x.0, c), |v| v.scale(c))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        if self.dims(b) != (ar, ac) {
            return Err(Error::shape(format!("elementwise op on {:?} and {:?}", (ar, ac), self.dims(b))));
        }
        let value = self.node(a).value.iter().zip(&self.node(b).value).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(ar, ac, value, Vec::new(), op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = S::zero();
        for &v in &self.node(x).value {
            acc += v;
        }
        let needs = self.node(x).needs_grad;
        self.push(1, 1, vec![acc], Vec::new(), Op::Sum(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x).value.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut acc = S::zero();
        for &v in &self.node(x).value {
            acc += v;
        }
        let needs = self.node(x).needs_grad;
        Ok(self.push(1, 1, vec![acc.scale(1.0 / n as f64)], Vec::new(), Op::Mean(x.0), needs))
    }

    /// Maximum entry; the gradient flows to the first maximizer.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let vals = &self.node(x).value;
        if vals.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut arg = 0;
        for (i, v) in vals.iter().enumerate() {
            if v.value() > vals[arg].value() {
                arg = i;
            }
        }
        let best = vals[arg];
        let needs = self.node(x).needs_grad;
        Ok(self.push(1, 1, vec![best], Vec::new(), Op::Max { x: x.0, arg }, needs))
    }

    /// Per-row softmax cross-entropy `-log softmax(logits_r)[label_r]`, shape `[n, 1]`.
    pub fn softmax_xent_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.dims(logits);
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != n {
            return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let lv = &self.node(logits).value;
        let mut losses = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let mut m = row[0];
            for &v in row {
                if v.value() > m.value() {
                    m = v;
                }
            }
            let mut z = S::zero();
            for &v in row {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            losses.push(lse - row[labels[r]]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let needs = self.node(logits).needs_grad;
        Ok(self.push(n, 1, losses, probs, Op::XentRows { logits: logits.0, labels: labels.to_vec() }, needs))
    }

    /// Per-row Bernoulli log-likelihood `Σ x·ln m + (1-x)·ln(1-m)` with
    /// `m = sigmoid(logits)` clamped to `[1e-7, 1-1e-7]`, shape `[n, 1]`.
    pub fn bernoulli_ll_rows(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (n, d) = self.dims(logits);
        if targets.len() != n * d {
            return Err(Error::shape(format!("{} targets for {n}x{d} logits", targets.len())));
        }
        let lv = &self.node(logits).value;
        let lo = S::constant(BERNOULLI_CLAMP);
        let hi = S::constant(1.0 - BERNOULLI_CLAMP);
        let one = S::constant(1.0);
        let mut means = Vec::with_capacity(n * d);
        let mut rows = Vec::with_capacity(n);
        for r in 0..n {
            let mut acc = S::zero();
            for c in 0..d {
                let i = r * d + c;
                let m = sigmoid(lv[i]);
                means.push(m);
                let mc = if m.value() < BERNOULLI_CLAMP {
                    lo
                } else if m.value() > 1.0 - BERNOULLI_CLAMP {
                    hi
                } else {
                    m
                };
                let x = targets[i];
                if x != 0.0 {
                    acc += mc.ln().scale(x);
                }
                if x != 1.0 {
                    acc += (one - mc).ln().scale(1.0 - x);
                }
            }
            rows.push(acc);
        }
        let needs = self.node(logits).needs_grad;
        Ok(self.push(n, 1, rows, means, Op::BernoulliRows { logits: logits.0, targets: targets.to_vec() }, needs))
    }

    /// Per-row KL divergence of `N(mu, exp(log_var))` from `N(0, I)`, shape `[n, 1]`.
    pub fn kl_rows(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        let (n, d) = self.dims(mu);
        if self.dims(log_var) != (n, d) {
            return Err(Error::shape("kl: mu and log_var differ in shape"));
        }
        let mv = &self.node(mu).value;
        let lv = &self.node(log_var).value;
        let one = S::constant(1.0);
        let mut rows = Vec::with_capacity(n);
        for r in 0..n {
            let mut acc = S::zero();
            for c in 0..d {
                let (m, l) = (mv[r * d + c], lv[r * d + c]);
                acc += m * m + l.exp() - one - l;
            }
            rows.push(acc.scale(0.5));
        }
        let needs = self.node(mu).needs_grad || self.node(log_var).needs_grad;
        Ok(self.push(n, 1, rows, Vec::new(), Op::KlRows { mu: mu.0, log_var: log_var.0 }, needs))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let root_node = self.node(root);
        if root_node.rows * root_node.cols != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![S::constant(1.0)]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<S>, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        macro_rules! with_slot {
            ($j:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(grads, nodes, $j) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, out) = (node.rows, node.cols);
                let inp = nodes[*w].cols;
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                with_slot!(*x, |gx| {
                    for r in 0..n {
                        for o in 0..out {
                            let d = dy[r * out + o];
                            if d == S::zero() {
                                continue;
                            }
                            let wr = &wv[o * inp..(o + 1) * inp];
                            let gr = &mut gx[r * inp..(r + 1) * inp];
                            for (g, &c) in gr.iter_mut().zip(wr) {
                                *g += d * c;
                            }
                        }
                    }
                });
                with_slot!(*w, |gw| {
                    for r in 0..n {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let d = dy[r * out + o];
                            if d == S::zero() {
                                continue;
                            }
                            let gr = &mut gw[o * inp..(o + 1) * inp];
                            for (g, &a) in gr.iter_mut().zip(xr) {
                                *g += d * a;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    with_slot!(*b, |gb| {
                        for r in 0..n {
                            for o in 0..out {
                                gb[o] += dy[r * out + o];
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[*x].value;
                with_slot!(*x, |gx| {
                    for ((g, &d), &v) in gx.iter_mut().zip(dy).zip(xv) {
                        if v.value() > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let one = S::constant(1.0);
                with_slot!(*x, |gx| {
                    for ((g, &d), &s) in gx.iter_mut().zip(dy).zip(&node.value) {
                        *g += d * s * (one - s);
                    }
                });
            }
            Op::Exp(x) => {
                with_slot!(*x, |gx| {
                    for ((g, &d), &y) in gx.iter_mut().zip(dy).zip(&node.value) {
                        *g += d * y;
                    }
                });
            }
            Op::Add(a, b) => {
                with_slot!(*a, |ga| {
                    for (g, &d) in ga.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                with_slot!(*b, |gb| {
                    for (g, &d) in gb.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |ga| {
                    for (g, &d) in ga.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                with_slot!(*b, |gb| {
                    for (g, &d) in gb.iter_mut().zip(dy) {
                        *g += -d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                with_slot!(*a, |ga| {
                    for ((g, &d), &y) in ga.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                });
                with_slot!(*b, |gb| {
                    for ((g, &d), &x) in gb.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                with_slot!(*x, |gx| {
                    for (g, &d) in gx.iter_mut().zip(dy) {
                        *g += d.scale(*c);
                    }
                });
            }
            Op::Sum(x) => {
                with_slot!(*x, |gx| {
                    for g in gx.iter_mut() {
                        *g += dy[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = nodes[*x].value.len() as f64;
                with_slot!(*x, |gx| {
                    let d = dy[0].scale(1.0 / n);
                    for g in gx.iter_mut() {
                        *g += d;
                    }
                });
            }
            Op::Max { x, arg } => {
                with_slot!(*x, |gx| {
                    gx[*arg] += dy[0];
                });
            }
            Op::XentRows { logits, labels } => {
                let k = nodes[*logits].cols;
                with_slot!(*logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        let d = dy[r];
                        for c in 0..k {
                            let p = node.aux[r * k + c];
                            let t = if c == label { p - S::constant(1.0) } else { p };
                            gl[r * k + c] += d * t;
                        }
                    }
                });
            }
            Op::BernoulliRows { logits, targets } => {
                let d_cols = nodes[*logits].cols;
                with_slot!(*logits, |gl| {
                    for (i, (&m, &x)) in node.aux.iter().zip(targets).enumerate() {
                        let mv = m.value();
                        if !(BERNOULLI_CLAMP..=1.0 - BERNOULLI_CLAMP).contains(&mv) {
                            continue;
                        }
                        gl[i] += dy[i / d_cols] * (S::constant(x) - m);
                    }
                });
            }
            Op::KlRows { mu, log_var } => {
                let d = nodes[*mu].cols;
                let (mv, lv) = (&nodes[*mu].value, &nodes[*log_var].value);
                with_slot!(*mu, |gm| {
                    for (i, (g, &m)) in gm.iter_mut().zip(mv).enumerate() {
                        *g += dy[i / d] * m;
                    }
                });
                with_slot!(*log_var, |gv| {
                    let one = S::constant(1.0);
                    for (i, (g, &l)) in gv.iter_mut().zip(lv).enumerate() {
                        *g += dy[i / d] * (l.exp() - one).scale(0.5);
                    }
                });
            }
        }
    }
}

fn grad_slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], nodes: &[Node<S>], j: usize) -> Option<&'a mut Vec<S>> {
    if !nodes[j].needs_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![S::zero(); len]))
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf; `None` for constants or nodes the root does not depend on.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A scalar objective of the split parameters `(w, λ)` on a batch.
///
/// Implementations receive one graph variable per parameter segment, in
/// segment order, and return the `[1, 1]` loss node.
pub trait ScalarFn {
    type Batch;

    fn build<S: Scalar>(&self, g: &mut Graph<S>, w: &[Var], lambda: &[Var], batch: &Self::Batch) -> Result<Var>;
}

impl<F: ScalarFn + ?Sized> ScalarFn for &F {
    type Batch = F::Batch;

    fn build<S: Scalar>(&self, g: &mut Graph<S>, w: &[Var], lambda: &[Var], batch: &Self::Batch) -> Result<Var> {
        (**self).build(g, w, lambda, batch)
    }
}

fn bind<S: Scalar>(g: &mut Graph<S>, p: &ParamVector, tangent: Option<&ParamVector>) -> Result<Vec<Var>> {
    let mut vars = Vec::with_capacity(p.segments().len());
    for (i, seg) in p.segments().iter().enumerate() {
        let (r, c) = seg.matrix_dims();
        let t = tangent.map(|t| t.segment(i));
        vars.push(g.param(r, c, p.segment(i), t)?);
    }
    Ok(vars)
}

struct Sweep<S> {
    loss: S,
    grad_w: Vec<S>,
    grad_lambda: Vec<S>,
}

fn collect<S: Scalar>(grads: &Gradients<S>, vars: &[Var], p: &ParamVector) -> Vec<S> {
    let mut out = Vec::with_capacity(p.len());
    for (v, seg) in vars.iter().zip(p.segments()) {
        match grads.get(*v) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(core::iter::repeat_n(S::zero(), seg.len())),
        }
    }
    out
}

fn sweep<S: Scalar, F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
    tangent_w: Option<&ParamVector>,
) -> Result<Sweep<S>> {
    if let Some(t) = tangent_w {
        w.check_layout(t, "tangent")?;
    }
    let mut g = Graph::<S>::new();
    let wv = bind(&mut g, w, tangent_w)?;
    let lv = bind(&mut g, lambda, None)?;
    let root = f.build(&mut g, &wv, &lv, batch)?;
    let loss = g.scalar(root)?;
    check_finite(loss.value(), "loss")?;
    let grads = g.backward(root)?;
    let grad_w = collect(&grads, &wv, w);
    let grad_lambda = collect(&grads, &lv, lambda);
    for s in grad_w.iter().chain(&grad_lambda) {
        check_finite(s.value(), "gradient")?;
        check_finite(s.tangent(), "second-order product")?;
    }
    Ok(Sweep { loss, grad_w, grad_lambda })
}

/// Loss value only.
pub fn value<F: ScalarFn>(f: &F, w: &ParamVector, lambda: &ParamVector, batch: &F::Batch) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let wv = bind(&mut g, w, None)?;
    let lv = bind(&mut g, lambda, None)?;
    let root = f.build(&mut g, &wv, &lv, batch)?;
    check_finite(g.scalar(root)?, "loss")
}

/// Loss and both partial gradients from one reverse sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueAndGrad {
    pub loss: f64,
    pub grad_w: ParamVector,
    pub grad_lambda: ParamVector,
}

pub fn value_and_grad<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
) -> Result<ValueAndGrad> {
    let s = sweep::<f64, F>(f, w, lambda, batch, None)?;
    Ok(ValueAndGrad {
        loss: s.loss,
        grad_w: w.unflatten(s.grad_w)?,
        grad_lambda: lambda.unflatten(s.grad_lambda)?,
    })
}

/// Loss and `∂f/∂w` with `λ` bound as a constant, so no work is spent on `∂f/∂λ`.
pub fn value_and_grad_w<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
) -> Result<(f64, ParamVector)> {
    let mut g = Graph::<f64>::new();
    let wv = bind(&mut g, w, None)?;
    let mut lv = Vec::with_capacity(lambda.segments().len());
    for (i, seg) in lambda.segments().iter().enumerate() {
        let (r, c) = seg.matrix_dims();
        lv.push(g.input(r, c, lambda.segment(i))?);
    }
    let root = f.build(&mut g, &wv, &lv, batch)?;
    let loss = check_finite(g.scalar(root)?, "loss")?;
    let grads = g.backward(root)?;
    let grad = collect(&grads, &wv, w);
    for v in &grad {
        check_finite(*v, "gradient")?;
    }
    Ok((loss, w.unflatten(grad)?))
}

/// `∂f/∂w`.
pub fn grad_w<F: ScalarFn>(f: &F, w: &ParamVector, lambda: &ParamVector, batch: &F::Batch) -> Result<ParamVector> {
    value_and_grad_w(f, w, lambda, batch).map(|r| r.1)
}

/// `∂f/∂λ`.
pub fn grad_lambda<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
) -> Result<ParamVector> {
    value_and_grad(f, w, lambda, batch).map(|r| r.grad_lambda)
}

/// Products of the second derivatives of `f` with a direction `v` on `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrder {
    /// `∇_w∇_w f · v`, shaped like `w`.
    pub hvp_ww: ParamVector,
    /// `∇_λ∇_w f · v`, shaped like `λ`.
    pub hvp_lw: ParamVector,
}

/// Both second-order products from a single dual-number sweep.
pub fn second_order<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
    v: &ParamVector,
) -> Result<SecondOrder> {
    let s = sweep::<Dual, F>(f, w, lambda, batch, Some(v))?;
    Ok(SecondOrder {
        hvp_ww: w.unflatten(s.grad_w.iter().map(|d| d.du).collect())?,
        hvp_lw: lambda.unflatten(s.grad_lambda.iter().map(|d| d.du).collect())?,
    })
}

/// `∇_w∇_w f · v`.
pub fn hvp_ww<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
    v: &ParamVector,
) -> Result<ParamVector> {
    second_order(f, w, lambda, batch, v).map(|s| s.hvp_ww)
}

/// `∇_λ∇_w f · v`.
pub fn hvp_lw<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
    v: &ParamVector,
) -> Result<ParamVector> {
    second_order(f, w, lambda, batch, v).map(|s| s.hvp_lw)
}

/// Central gradient-difference estimate of both second-order products:
/// `(∇f(w+εv) − ∇f(w−εv)) / 2ε`.
pub fn gradient_difference<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
    v: &ParamVector,
    eps: f64,
) -> Result<SecondOrder> {
    if eps <= 0.0 {
        return Err(Error::invalid("gradient-difference step must be positive"));
    }
    let mut plus = w.clone();
    plus.axpy(eps, v)?;
    let mut minus = w.clone();
    minus.axpy(-eps, v)?;
    let gp = value_and_grad(f, &plus, lambda, batch)?;
    let gm = value_and_grad(f, &minus, lambda, batch)?;
    let mut hvp_ww = gp.grad_w.sub(&gm.grad_w)?;
    hvp_ww.scale(0.5 / eps);
    let mut hvp_lw = gp.grad_lambda.sub(&gm.grad_lambda)?;
    hvp_lw.scale(0.5 / eps);
    Ok(SecondOrder { hvp_ww, hvp_lw })
}

/// How second-order products are obtained at run time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SecondOrderMethod {
    /// Forward-over-reverse dual sweep.
    #[default]
    Exact,
    /// Central gradient differences with the given step.
    GradientDifference { eps: f64 },
}

impl SecondOrderMethod {
    pub fn apply<F: ScalarFn>(
        self,
        f: &F,
        w: &ParamVector,
        lambda: &ParamVector,
        batch: &F::Batch,
        v: &ParamVector,
    ) -> Result<SecondOrder> {
        match self {
            SecondOrderMethod::Exact => second_order(f, w, lambda, batch, v),
            SecondOrderMethod::GradientDifference { eps } => gradient_difference(f, w, lambda, batch, v, eps),
        }
    }
}

/// Central-difference gradient of an arbitrary function of one parameter vector.
pub fn finite_diff_grad(
    mut f: impl FnMut(&ParamVector) -> Result<f64>,
    params: &ParamVector,
    eps: f64,
) -> Result<ParamVector> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    for i in 0..params.len() {
        let x0 = params.as_slice()[i];
        probe.as_mut_slice()[i] = x0 + eps;
        let up = f(&probe)?;
        probe.as_mut_slice()[i] = x0 - eps;
        let down = f(&probe)?;
        probe.as_mut_slice()[i] = x0;
        out.as_mut_slice()[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Finite-difference `∂f/∂w`.
pub fn finite_diff_grad_w<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
    eps: f64,
) -> Result<ParamVector> {
    finite_diff_grad(|p| value(f, p, lambda, batch), w, eps)
}

/// Finite-difference `∂f/∂λ`.
pub fn finite_diff_grad_lambda<F: ScalarFn>(
    f: &F,
    w: &ParamVector,
    lambda: &ParamVector,
    batch: &F::Batch,
    eps: f64,
) -> Result<ParamVector> {
    finite_diff_grad(|p| value(f, w, p, batch), lambda, eps)
}

/// Largest relative deviation `|a−b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
