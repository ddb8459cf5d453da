//! Tape of dense tensor operations with reverse-mode gradients.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep. Leading
//! dimensions are treated as rows by the row-wise ops (`matmul`, `add_bias`,
//! `mean_rows`), which makes time-distributed layers free.

use crate::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} holds {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    MeanRows(Var),
    DotConst(Var, Vec<f64>),
    CausalConv1d { x: Var, kernel: Var, bias: Var },
    AvgPool1d { x: Var, window: usize },
    SelectStep { x: Var, step: usize },
    Stack(Vec<Var>),
    SliceLast { x: Var, start: usize },
    LagDiff(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `v`; `None` if the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.fault.is_none() && value.data.iter().any(|v| !v.is_finite()) {
            self.fault = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push("input", t, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push("param", t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Errors if any recorded forward value was non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `x (.., in) @ w (in, out)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape.len() != 2 || xs.last_dim() != ws.shape[0] {
            return Err(mismatch(
                "matmul",
                format!("input {:?} vs weights {:?}", xs.shape, ws.shape),
            ));
        }
        let (k, n) = (ws.shape[0], ws.shape[1]);
        let rows = xs.numel() / k.max(1);
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let xr = &xs.data[r * k..(r + 1) * k];
            let orow = &mut out[r * n..(r + 1) * n];
            for (i, &xv) in xr.iter().enumerate() {
                let wr = &ws.data[i * n..(i + 1) * n];
                for (o, &wv) in orow.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        let mut shape = xs.shape.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push("matmul", Tensor { shape, data: out }, Op::MatMul(x, w), ng))
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        let n = xs.last_dim();
        if bs.numel() != n {
            return Err(mismatch(
                "add_bias",
                format!("input {:?} vs bias {:?}", xs.shape, bs.shape),
            ));
        }
        let data = xs
            .data
            .iter()
            .enumerate()
            .map(|(idx, v)| v + bs.data[idx % n])
            .collect();
        let shape = xs.shape.clone();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push("add_bias", Tensor { shape, data }, Op::AddBias(x, b), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = av.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(name, Tensor { shape, data }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xs = self.value(x);
        if c.len() != xs.numel() {
            return Err(mismatch(
                "mul_const",
                format!("{} values vs {:?}", c.len(), xs.shape),
            ));
        }
        let data = xs.data.iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = xs.shape.clone();
        let ng = self.ng(x);
        Ok(self.push("mul_const", Tensor { shape, data }, Op::MulConst(x, c), ng))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xs = self.value(x);
        let data = xs.data.iter().map(|v| f(*v)).collect();
        let shape = xs.shape.clone();
        let ng = self.ng(x);
        self.push(name, Tensor { shape, data }, op, ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary("scale", x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary("add_scalar", x, |v| v + k, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean over all leading dimensions, leaving the last one.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let c = xs.last_dim();
        let rows = xs.numel() / c.max(1);
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&xs.data[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let ng = self.ng(x);
        self.push("mean_rows", Tensor { shape: vec![c], data: out }, Op::MeanRows(x), ng)
    }

    /// Weighted sum with constant weights, shape `[1]`.
    pub fn dot_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xs = self.value(x);
        if c.len() != xs.numel() {
            return Err(mismatch(
                "dot_const",
                format!("{} weights vs {:?}", c.len(), xs.shape),
            ));
        }
        let s = xs.data.iter().zip(&c).map(|(a, b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push("dot_const", Tensor::scalar(s), Op::DotConst(x, c), ng))
    }

    /// Causal 1-D convolution of `x (B, L, Cin)` with `kernel (W, Cin, Cout)`.
    /// Kernel tap `s` multiplies the input `s` steps back; earlier steps are
    /// zero padded.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xs, ks, bs) = (self.value(x), self.value(kernel), self.value(bias));
        if xs.shape.len() != 3 || ks.shape.len() != 3 || ks.shape[1] != xs.shape[2] {
            return Err(mismatch(
                "causal_conv1d",
                format!("input {:?} vs kernel {:?}", xs.shape, ks.shape),
            ));
        }
        let (b, l, cin) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let (w, cout) = (ks.shape[0], ks.shape[2]);
        if w == 0 || bs.numel() != cout {
            return Err(mismatch("causal_conv1d", format!("kernel {:?}, bias {:?}", ks.shape, bs.shape)));
        }
        let mut out = vec![0.0; b * l * cout];
        for bi in 0..b {
            for t in 0..l {
                let o = &mut out[(bi * l + t) * cout..(bi * l + t + 1) * cout];
                o.copy_from_slice(&bs.data);
                for s in 0..w.min(t + 1) {
                    let xr = &xs.data[(bi * l + t - s) * cin..(bi * l + t - s + 1) * cin];
                    for (c, &xv) in xr.iter().enumerate() {
                        let kr = &ks.data[(s * cin + c) * cout..(s * cin + c + 1) * cout];
                        for (ov, kv) in o.iter_mut().zip(kr) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(kernel) || self.ng(bias);
        Ok(self.push(
            "causal_conv1d",
            Tensor {
                shape: vec![b, l, cout],
                data: out,
            },
            Op::CausalConv1d { x, kernel, bias },
            ng,
        ))
    }

    /// Non-overlapping mean pooling over the time axis of `x (B, L, C)`.
    /// Windows are aligned to the most recent step; a partial window at the
    /// oldest end is dropped.
    pub fn avg_pool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xs = self.value(x);
        if window == 0 {
            return Err(Error::invalid("pooling window must be at least 1"));
        }
        if xs.shape.len() != 3 || xs.shape[1] < window {
            return Err(mismatch(
                "avg_pool1d",
                format!("input {:?} vs window {window}", xs.shape),
            ));
        }
        let (b, l, c) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let p = l / window;
        let offset = l - p * window;
        let mut out = vec![0.0; b * p * c];
        for bi in 0..b {
            for pi in 0..p {
                let o = &mut out[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                for s in 0..window {
                    let t = offset + pi * window + s;
                    for (ov, xv) in o.iter_mut().zip(&xs.data[(bi * l + t) * c..(bi * l + t + 1) * c]) {
                        *ov += xv;
                    }
                }
                for ov in o.iter_mut() {
                    *ov /= window as f64;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            "avg_pool1d",
            Tensor {
                shape: vec![b, p, c],
                data: out,
            },
            Op::AvgPool1d { x, window },
            ng,
        ))
    }

    /// Time step `step` of `x (B, L, C)` as `(B, C)`.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape.len() != 3 || step >= xs.shape[1] {
            return Err(mismatch("select_step", format!("{:?} step {step}", xs.shape)));
        }
        let (b, l, c) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            out.extend_from_slice(&xs.data[(bi * l + step) * c..(bi * l + step + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            "select_step",
            Tensor {
                shape: vec![b, c],
                data: out,
            },
            Op::SelectStep { x, step },
            ng,
        ))
    }

    /// Stacks `L` tensors of shape `(B, C)` into `(B, L, C)`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| Error::invalid("stack_steps needs at least one step"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 || steps.iter().any(|v| self.shape(*v) != s0.as_slice()) {
            return Err(mismatch("stack_steps", "steps must share a (B, C) shape".into()));
        }
        let (b, c, l) = (s0[0], s0[1], steps.len());
        let mut out = vec![0.0; b * l * c];
        for (t, v) in steps.iter().enumerate() {
            let d = &self.value(*v).data;
            for bi in 0..b {
                out[(bi * l + t) * c..(bi * l + t + 1) * c].copy_from_slice(&d[bi * c..(bi + 1) * c]);
            }
        }
        let ng = steps.iter().any(|v| self.ng(*v));
        Ok(self.push(
            "stack_steps",
            Tensor {
                shape: vec![b, l, c],
                data: out,
            },
            Op::Stack(steps.to_vec()),
            ng,
        ))
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.last_dim();
        if start + len > c {
            return Err(mismatch("slice_last", format!("{start}+{len} > {c}")));
        }
        let rows = xs.numel() / c.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs.data[r * c + start..r * c + start + len]);
        }
        let mut shape = xs.shape.clone();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        Ok(self.push("slice_last", Tensor { shape, data: out }, Op::SliceLast { x, start }, ng))
    }

    /// Difference along the middle axis of `x (O, L, I)`:
    /// `out[o, l] = x[o, l] - x[o, l - 1]`, and zero at `l = 0`.
    pub fn lag_diff(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape.len() != 3 {
            return Err(mismatch("lag_diff", format!("{:?}", xs.shape)));
        }
        let (o, l, i) = (xs.shape[0], xs.shape[1], xs.shape[2]);
        let mut out = vec![0.0; xs.numel()];
        for oi in 0..o {
            for t in 1..l {
                for k in 0..i {
                    let idx = (oi * l + t) * i + k;
                    out[idx] = xs.data[idx] - xs.data[idx - i];
                }
            }
        }
        let shape = xs.shape.clone();
        let ng = self.ng(x);
        Ok(self.push("lag_diff", Tensor { shape, data: out }, Op::LagDiff(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xs = self.value(x);
        if shape.iter().product::<usize>() != xs.numel() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", xs.shape)));
        }
        let data = xs.data.clone();
        let ng = self.ng(x);
        Ok(self.push("reshape", Tensor { shape, data }, Op::Reshape(x), ng))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.value(loss).numel() != 1 {
            return Err(mismatch("backward", "loss must be a scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value.data;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (k, n) = (wv.shape[0], wv.shape[1]);
                    let rows = xv.numel() / k.max(1);
                    if self.ng(*x) {
                        let gx = acc(&mut grads, self, *x);
                        for r in 0..rows {
                            let gr = &g[r * n..(r + 1) * n];
                            for i in 0..k {
                                let wr = &wv.data[i * n..(i + 1) * n];
                                gx[r * k + i] += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    if self.ng(*w) {
                        let gw = acc(&mut grads, self, *w);
                        for r in 0..rows {
                            let gr = &g[r * n..(r + 1) * n];
                            for i in 0..k {
                                let xv_ri = xv.data[r * k + i];
                                for (gwv, gv) in gw[i * n..(i + 1) * n].iter_mut().zip(gr) {
                                    *gwv += xv_ri * gv;
                                }
                            }
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    let n = self.value(*b).numel();
                    if self.ng(*x) {
                        add_into(acc(&mut grads, self, *x), &g);
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, self, *b);
                        for (j, v) in g.iter().enumerate() {
                            gb[j % n] += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        add_into(acc(&mut grads, self, *a), &g);
                    }
                    if self.ng(*b) {
                        add_into(acc(&mut grads, self, *b), &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        add_into(acc(&mut grads, self, *a), &g);
                    }
                    if self.ng(*b) {
                        for (o, v) in acc(&mut grads, self, *b).iter_mut().zip(&g) {
                            *o -= v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                    if self.ng(*a) {
                        for ((o, gv), bb) in acc(&mut grads, self, *a).iter_mut().zip(&g).zip(bv) {
                            *o += gv * bb;
                        }
                    }
                    if self.ng(*b) {
                        for ((o, gv), aa) in acc(&mut grads, self, *b).iter_mut().zip(&g).zip(av) {
                            *o += gv * aa;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let bv = &self.value(*b).data;
                    if self.ng(*a) {
                        for ((o, gv), bb) in acc(&mut grads, self, *a).iter_mut().zip(&g).zip(bv) {
                            *o += gv / bb;
                        }
                    }
                    if self.ng(*b) {
                        for (((o, gv), bb), yy) in
                            acc(&mut grads, self, *b).iter_mut().zip(&g).zip(bv).zip(y)
                        {
                            *o -= gv * yy / bb;
                        }
                    }
                }
                Op::MulConst(x, c) => {
                    for ((o, gv), cc) in acc(&mut grads, self, *x).iter_mut().zip(&g).zip(c) {
                        *o += gv * cc;
                    }
                }
                Op::Scale(x, k) => {
                    for (o, gv) in acc(&mut grads, self, *x).iter_mut().zip(&g) {
                        *o += gv * k;
                    }
                }
                Op::AddScalar(x) | Op::Reshape(x) => add_into(acc(&mut grads, self, *x), &g),
                Op::Tanh(x) => {
                    for ((o, gv), yy) in acc(&mut grads, self, *x).iter_mut().zip(&g).zip(y) {
                        *o += gv * (1.0 - yy * yy);
                    }
                }
                Op::Sigmoid(x) => {
                    for ((o, gv), yy) in acc(&mut grads, self, *x).iter_mut().zip(&g).zip(y) {
                        *o += gv * yy * (1.0 - yy);
                    }
                }
                Op::Abs(x) => {
                    let xv = &self.value(*x).data;
                    for ((o, gv), xx) in acc(&mut grads, self, *x).iter_mut().zip(&g).zip(xv) {
                        *o += gv * signum0(*xx);
                    }
                }
                Op::Square(x) => {
                    let xv = &self.value(*x).data;
                    for ((o, gv), xx) in acc(&mut grads, self, *x).iter_mut().zip(&g).zip(xv) {
                        *o += gv * 2.0 * xx;
                    }
                }
                Op::Sqrt(x) => {
                    for ((o, gv), yy) in acc(&mut grads, self, *x).iter_mut().zip(&g).zip(y) {
                        *o += gv * 0.5 / yy;
                    }
                }
                Op::Sum(x) => {
                    for o in acc(&mut grads, self, *x).iter_mut() {
                        *o += g[0];
                    }
                }
                Op::MeanRows(x) => {
                    let c = g.len();
                    let gx = acc(&mut grads, self, *x);
                    let rows = gx.len() / c.max(1);
                    let inv = 1.0 / rows as f64;
                    for (j, o) in gx.iter_mut().enumerate() {
                        *o += g[j % c] * inv;
                    }
                }
                Op::DotConst(x, c) => {
                    for (o, cc) in acc(&mut grads, self, *x).iter_mut().zip(c) {
                        *o += g[0] * cc;
                    }
                }
                Op::CausalConv1d { x, kernel, bias } => {
                    let (xv, kv) = (self.value(*x), self.value(*kernel));
                    let (b, l, cin) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                    let (w, cout) = (kv.shape[0], kv.shape[2]);
                    if self.ng(*bias) {
                        let gb = acc(&mut grads, self, *bias);
                        for (j, v) in g.iter().enumerate() {
                            gb[j % cout] += v;
                        }
                    }
                    if self.ng(*kernel) {
                        let gk = acc(&mut grads, self, *kernel);
                        for bi in 0..b {
                            for t in 0..l {
                                let go = &g[(bi * l + t) * cout..(bi * l + t + 1) * cout];
                                for s in 0..w.min(t + 1) {
                                    for c in 0..cin {
                                        let xval = xv.data[(bi * l + t - s) * cin + c];
                                        let gkr = &mut gk[(s * cin + c) * cout..(s * cin + c + 1) * cout];
                                        for (gkv, gov) in gkr.iter_mut().zip(go) {
                                            *gkv += xval * gov;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if self.ng(*x) {
                        let gx = acc(&mut grads, self, *x);
                        for bi in 0..b {
                            for t in 0..l {
                                let go = &g[(bi * l + t) * cout..(bi * l + t + 1) * cout];
                                for s in 0..w.min(t + 1) {
                                    for c in 0..cin {
                                        let kr = &kv.data[(s * cin + c) * cout..(s * cin + c + 1) * cout];
                                        gx[(bi * l + t - s) * cin + c] +=
                                            kr.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                }
                            }
                        }
                    }
                }
                Op::AvgPool1d { x, window } => {
                    let xv = self.value(*x);
                    let (b, l, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                    let p = l / window;
                    let offset = l - p * window;
                    let gx = acc(&mut grads, self, *x);
                    let inv = 1.0 / *window as f64;
                    for bi in 0..b {
                        for pi in 0..p {
                            for s in 0..*window {
                                let t = offset + pi * window + s;
                                for k in 0..c {
                                    gx[(bi * l + t) * c + k] += g[(bi * p + pi) * c + k] * inv;
                                }
                            }
                        }
                    }
                }
                Op::SelectStep { x, step } => {
                    let xv = self.value(*x);
                    let (b, l, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                    let gx = acc(&mut grads, self, *x);
                    for bi in 0..b {
                        for k in 0..c {
                            gx[(bi * l + step) * c + k] += g[bi * c + k];
                        }
                    }
                }
                Op::Stack(steps) => {
                    let (b, l, c) = (node.value.shape[0], node.value.shape[1], node.value.shape[2]);
                    for (t, v) in steps.iter().enumerate() {
                        if !self.ng(*v) {
                            continue;
                        }
                        let gv = acc(&mut grads, self, *v);
                        for bi in 0..b {
                            for k in 0..c {
                                gv[bi * c + k] += g[(bi * l + t) * c + k];
                            }
                        }
                    }
                }
                Op::SliceLast { x, start } => {
                    let c = self.value(*x).last_dim();
                    let len = node.value.last_dim();
                    let gx = acc(&mut grads, self, *x);
                    let rows = gx.len() / c.max(1);
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::LagDiff(x) => {
                    let (o, l, i) = (node.value.shape[0], node.value.shape[1], node.value.shape[2]);
                    let gx = acc(&mut grads, self, *x);
                    for oi in 0..o {
                        for t in 1..l {
                            for k in 0..i {
                                let idx = (oi * l + t) * i + k;
                                gx[idx] += g[idx];
                                gx[idx - i] -= g[idx];
                            }
                        }
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Accumulator for the gradient of `v`, created on first use.
fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], g: &Graph, v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; g.value(v).numel()])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
