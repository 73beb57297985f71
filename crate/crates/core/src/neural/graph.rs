//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Every operation is evaluated eagerly when it is recorded. [`Graph::backward`]
//! then walks the tape in reverse, accumulating adjoints. Parameters enter the
//! tape through [`Graph::param`] with a slot number so their gradients can be
//! collected into a flat list afterwards.

use std::borrow::Cow;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Affine { w: usize, x: usize, b: Option<usize> },
    Concat(usize, usize),
    Slice { a: usize, start: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax(usize),
    WeightedSum { weights: usize, items: Vec<usize> },
    Stack(Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
    ScaleShift { a: usize, scale: f64 },
    SmoothL1Mean { pred: usize, target: Vec<f64> },
    MseMean { pred: usize, target: Vec<f64> },
    MaeMean { pred: usize, target: Vec<f64> },
    HingeMean(usize),
    Variance(usize),
    LstmGates { z: usize, state: usize },
    AttnScore { wb: usize, bb: usize, wa: usize, ba: usize, h: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Affine { .. } => "affine",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Stack(_) => "stack",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::ScaleShift { .. } => "scale_shift",
            Op::SmoothL1Mean { .. } => "smooth_l1",
            Op::MseMean { .. } => "mse",
            Op::MaeMean { .. } => "mae",
            Op::HingeMean(_) => "hinge",
            Op::Variance(_) => "variance",
            Op::LstmGates { .. } => "lstm_gates",
            Op::AttnScore { .. } => "attn_score",
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    param_nodes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`; `None` when no path reaches it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        let g = &self.grads[var.0];
        (!g.is_empty()).then_some(g.as_slice())
    }

    /// Adds every parameter gradient into `out[slot]`.
    pub fn accumulate_params(&self, out: &mut [Tensor]) {
        for &(node, slot) in &self.param_nodes {
            let g = &self.grads[node];
            if g.is_empty() {
                continue;
            }
            for (o, x) in out[slot].data_mut().iter_mut().zip(g) {
                *o += x;
            }
        }
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<(usize, usize)>,
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Result<Var> {
        let idx = self.nodes.len();
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { node: idx, op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(idx))
    }

    fn push_vec(&mut self, data: Vec<f64>, op: Op) -> Result<Var> {
        self.push(Cow::Owned(Tensor::vector(data)), op)
    }

    fn push_scalar(&mut self, x: f64, op: Op) -> Result<Var> {
        self.push(Cow::Owned(Tensor::scalar(x)), op)
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(Cow::Owned(value), Op::Input)
    }

    /// Learnable parameter living outside the graph, tagged with `slot`.
    pub fn param(&mut self, value: &'p Tensor, slot: usize) -> Result<Var> {
        let v = self.push(Cow::Borrowed(value), Op::Param)?;
        self.param_nodes.push((v.0, slot));
        Ok(v)
    }

    /// `w x + b` for `w: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.value(w).shape();
        if ws.len() != 2 {
            return Err(shape_err("affine", &[0, 0], ws));
        }
        let (m, n) = (ws[0], ws[1]);
        if self.value(x).len() != n {
            return Err(shape_err("affine", &[n], self.value(x).shape()));
        }
        if let Some(b) = b {
            if self.value(b).len() != m {
                return Err(shape_err("affine", &[m], self.value(b).shape()));
            }
        }
        let wd = self.data(w.0);
        let xd = self.data(x.0);
        let mut out: Vec<f64> = match b {
            Some(b) => self.data(b.0).to_vec(),
            None => vec![0.0; m],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            *o += row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push_vec(
            out,
            Op::Affine {
                w: w.0,
                x: x.0,
                b: b.map(|v| v.0),
            },
        )
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.affine(w, x, None)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.data(a.0).to_vec();
        out.extend_from_slice(self.data(b.0));
        self.push_vec(out, Op::Concat(a.0, b.0))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(a).len();
        if start + len > n {
            return Err(shape_err("slice", &[start + len], &[n]));
        }
        let out = self.data(a.0)[start..start + len].to_vec();
        self.push_vec(out, Op::Slice { a: a.0, start })
    }

    fn zip_with(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (sa, sb) = (self.value(a).len(), self.value(b).len());
        if sa != sb {
            return Err(shape_err(op_name, &[sa], &[sb]));
        }
        Ok(self.data(a.0).iter().zip(self.data(b.0)).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push_vec(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push_vec(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push_vec(out, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a.0).iter().map(|x| c * x).collect();
        self.push_vec(out, Op::Scale(a.0, c))
    }

    /// `scale * a + shift`, with a per-element constant shift.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: Vec<f64>) -> Result<Var> {
        if shift.len() != self.value(a).len() {
            return Err(shape_err("scale_shift", &[self.value(a).len()], &[shift.len()]));
        }
        let out = self.data(a.0).iter().zip(&shift).map(|(x, s)| scale * x + s).collect();
        self.push_vec(out, Op::ScaleShift { a: a.0, scale })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a.0).iter().map(|&x| sigmoid(x)).collect();
        self.push_vec(out, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a.0).iter().map(|x| x.tanh()).collect();
        self.push_vec(out, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a.0).iter().map(|x| x.max(0.0)).collect();
        self.push_vec(out, Op::Relu(a.0))
    }

    /// Softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a.0);
        if x.is_empty() {
            return Err(shape_err("softmax", &[1], &[0]));
        }
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let out = e.into_iter().map(|v| v / z).collect();
        self.push_vec(out, Op::Softmax(a.0))
    }

    /// `sum_i weights[i] * items[i]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        if self.value(weights).len() != items.len() || items.is_empty() {
            return Err(shape_err("weighted_sum", &[items.len()], self.value(weights).shape()));
        }
        let n = self.value(items[0]).len();
        let mut out = vec![0.0; n];
        for (k, it) in items.iter().enumerate() {
            let h = self.data(it.0);
            if h.len() != n {
                return Err(shape_err("weighted_sum", &[n], &[h.len()]));
            }
            let w = self.data(weights.0)[k];
            for (o, x) in out.iter_mut().zip(h) {
                *o += w * x;
            }
        }
        let items = items.iter().map(|v| v.0).collect();
        self.push_vec(out, Op::WeightedSum { weights: weights.0, items })
    }

    /// Stacks single-element nodes into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(items.len());
        for it in items {
            let v = self.value(*it);
            if v.len() != 1 {
                return Err(shape_err("stack", &[1], v.shape()));
            }
            out.push(v.item());
        }
        self.push_vec(out, Op::Stack(items.iter().map(|v| v.0).collect()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a.0).iter().sum();
        self.push_scalar(s, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a.0);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push_scalar(s, Op::Mean(a.0))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a.0).iter().map(|x| x * x).sum();
        self.push_scalar(s, Op::SumSquares(a.0))
    }

    fn check_target(&self, pred: Var, target: &[f64], op: &'static str) -> Result<()> {
        let n = self.value(pred).len();
        if n != target.len() || n == 0 {
            return Err(shape_err(op, &[n], &[target.len()]));
        }
        Ok(())
    }

    /// Mean smooth-L1: `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1_mean(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        self.check_target(pred, &target, "smooth_l1")?;
        let p = self.data(pred.0);
        let s = p.iter().zip(&target).map(|(x, y)| smooth_l1(x - y)).sum::<f64>() / p.len() as f64;
        self.push_scalar(s, Op::SmoothL1Mean { pred: pred.0, target })
    }

    pub fn mse_mean(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        self.check_target(pred, &target, "mse")?;
        let p = self.data(pred.0);
        let s = p.iter().zip(&target).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / p.len() as f64;
        self.push_scalar(s, Op::MseMean { pred: pred.0, target })
    }

    pub fn mae_mean(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        self.check_target(pred, &target, "mae")?;
        let p = self.data(pred.0);
        let s = p.iter().zip(&target).map(|(x, y)| (x - y).abs()).sum::<f64>() / p.len() as f64;
        self.push_scalar(s, Op::MaeMean { pred: pred.0, target })
    }

    /// `mean(max(0, a))`.
    pub fn hinge_mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a.0);
        let s = d.iter().map(|x| x.max(0.0)).sum::<f64>() / d.len() as f64;
        self.push_scalar(s, Op::HingeMean(a.0))
    }

    /// Fused LSTM state update.
    ///
    /// `z` holds the stacked gate pre-activations `[i, f, g, o]` (length `4H`)
    /// and `state` the previous `[h, c]` (length `2H`). Returns the new `[h, c]`.
    pub fn lstm_gates(&mut self, z: Var, state: Var) -> Result<Var> {
        let hidden = self.value(state).len() / 2;
        if self.value(z).len() != 4 * hidden || self.value(state).len() != 2 * hidden {
            return Err(shape_err("lstm_gates", &[4 * hidden], self.value(z).shape()));
        }
        let zd = self.data(z.0);
        let c_prev = &self.data(state.0)[hidden..];
        let mut out = vec![0.0; 2 * hidden];
        for k in 0..hidden {
            let i = sigmoid(zd[k]);
            let f = sigmoid(zd[hidden + k]);
            let g = zd[2 * hidden + k].tanh();
            let o = sigmoid(zd[3 * hidden + k]);
            let c = f * c_prev[k] + i * g;
            out[k] = o * c.tanh();
            out[hidden + k] = c;
        }
        self.push_vec(out, Op::LstmGates { z: z.0, state: state.0 })
    }

    /// Fused attention score `w_a · ReLU(w_b h + b_b) + b_a` for one step.
    pub fn attn_score(&mut self, p: [Var; 4], h: Var) -> Result<Var> {
        let [wb, bb, wa, ba] = p;
        let ws = self.value(wb).shape().to_vec();
        if ws.len() != 2
            || self.value(h).len() != ws[1]
            || self.value(bb).len() != ws[0]
            || self.value(wa).len() != ws[0]
            || self.value(ba).len() != 1
        {
            return Err(shape_err("attn_score", &ws, self.value(h).shape()));
        }
        let (m, n) = (ws[0], ws[1]);
        let (wbd, bbd, wad, hd) = (self.data(wb.0), self.data(bb.0), self.data(wa.0), self.data(h.0));
        let mut score = self.data(ba.0)[0];
        for r in 0..m {
            let u = bbd[r] + wbd[r * n..(r + 1) * n].iter().zip(hd).map(|(a, b)| a * b).sum::<f64>();
            if u > 0.0 {
                score += wad[r] * u;
            }
        }
        self.push_vec(
            vec![score],
            Op::AttnScore {
                wb: wb.0,
                bb: bb.0,
                wa: wa.0,
                ba: ba.0,
                h: h.0,
            },
        )
    }

    /// Population variance of the elements of `a`.
    pub fn variance(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a.0);
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let s = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        self.push_scalar(s, Op::Variance(a.0))
    }

    /// Reverse sweep from a single-element `root`, seeded with `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Result<Gradients> {
        self.backward_many(&[(root, seed)])
    }

    /// Reverse sweep from several single-element roots at once. Seeds on the
    /// same root add up.
    pub fn backward_many(&self, seeds: &[(Var, f64)]) -> Result<Gradients> {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        let mut top = 0;
        if seeds.is_empty() {
            return Ok(Gradients {
                grads,
                param_nodes: self.param_nodes.clone(),
            });
        }
        for &(root, seed) in seeds {
            if self.value(root).len() != 1 {
                return Err(shape_err("backward", &[1], self.value(root).shape()));
            }
            let g = &mut grads[root.0];
            if g.is_empty() {
                g.push(0.0);
            }
            g[0] += seed;
            top = top.max(root.0);
        }
        for i in (0..=top).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = &upper[0];
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.propagate(i, g, lower);
        }
        Ok(Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn slot<'a>(&self, lower: &'a mut [Vec<f64>], j: usize) -> &'a mut [f64] {
        if lower[j].is_empty() {
            lower[j] = vec![0.0; self.nodes[j].value.len()];
        }
        &mut lower[j]
    }

    fn propagate(&self, i: usize, g: &[f64], lower: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let len = |j: usize| self.nodes[j].value.len();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Affine { w, x, b } => {
                let xd = self.data(*x);
                let n = xd.len();
                {
                    let gw = self.slot(lower, *w);
                    for (r, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (o, xv) in gw[r * n..(r + 1) * n].iter_mut().zip(xd) {
                            *o += gi * xv;
                        }
                    }
                }
                let wd = self.data(*w);
                let gx = self.slot(lower, *x);
                for (r, gi) in g.iter().enumerate() {
                    if *gi == 0.0 {
                        continue;
                    }
                    for (o, wv) in gx.iter_mut().zip(&wd[r * n..(r + 1) * n]) {
                        *o += gi * wv;
                    }
                }
                if let Some(b) = b {
                    for (o, gi) in self.slot(lower, *b).iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = len(*a);
                for (o, gi) in self.slot(lower, *a).iter_mut().zip(&g[..na]) {
                    *o += gi;
                }
                for (o, gi) in self.slot(lower, *b).iter_mut().zip(&g[na..]) {
                    *o += gi;
                }
            }
            Op::Slice { a, start } => {
                let ga = self.slot(lower, *a);
                for (o, gi) in ga[*start..*start + g.len()].iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Add(a, b) => {
                for (o, gi) in self.slot(lower, *a).iter_mut().zip(g) {
                    *o += gi;
                }
                for (o, gi) in self.slot(lower, *b).iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Sub(a, b) => {
                for (o, gi) in self.slot(lower, *a).iter_mut().zip(g) {
                    *o += gi;
                }
                for (o, gi) in self.slot(lower, *b).iter_mut().zip(g) {
                    *o -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                for ((o, gi), bv) in self.slot(lower, *a).iter_mut().zip(g).zip(bd) {
                    *o += gi * bv;
                }
                for ((o, gi), av) in self.slot(lower, *b).iter_mut().zip(g).zip(ad) {
                    *o += gi * av;
                }
            }
            Op::Scale(a, c) => {
                for (o, gi) in self.slot(lower, *a).iter_mut().zip(g) {
                    *o += c * gi;
                }
            }
            Op::ScaleShift { a, scale, .. } => {
                for (o, gi) in self.slot(lower, *a).iter_mut().zip(g) {
                    *o += scale * gi;
                }
            }
            Op::Sigmoid(a) => {
                for ((o, gi), yv) in self.slot(lower, *a).iter_mut().zip(g).zip(y) {
                    *o += gi * yv * (1.0 - yv);
                }
            }
            Op::Tanh(a) => {
                for ((o, gi), yv) in self.slot(lower, *a).iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yv * yv);
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                for ((o, gi), xv) in self.slot(lower, *a).iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                for ((o, gi), yv) in self.slot(lower, *a).iter_mut().zip(g).zip(y) {
                    *o += yv * (gi - dot);
                }
            }
            Op::WeightedSum { weights, items } => {
                let wd = self.data(*weights).to_vec();
                for (k, &it) in items.iter().enumerate() {
                    let h = self.data(it);
                    let dw: f64 = g.iter().zip(h).map(|(gi, hv)| gi * hv).sum();
                    self.slot(lower, *weights)[k] += dw;
                    for (o, gi) in self.slot(lower, it).iter_mut().zip(g) {
                        *o += wd[k] * gi;
                    }
                }
            }
            Op::Stack(items) => {
                for (k, &it) in items.iter().enumerate() {
                    self.slot(lower, it)[0] += g[k];
                }
            }
            Op::Sum(a) => {
                for o in self.slot(lower, *a).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean(a) => {
                let n = len(*a) as f64;
                for o in self.slot(lower, *a).iter_mut() {
                    *o += g[0] / n;
                }
            }
            Op::SumSquares(a) => {
                let x = self.data(*a);
                for (o, xv) in self.slot(lower, *a).iter_mut().zip(x) {
                    *o += 2.0 * xv * g[0];
                }
            }
            Op::SmoothL1Mean { pred, target } => {
                let p = self.data(*pred);
                let n = p.len() as f64;
                for ((o, pv), tv) in self.slot(lower, *pred).iter_mut().zip(p).zip(target) {
                    *o += g[0] * smooth_l1_grad(pv - tv) / n;
                }
            }
            Op::MseMean { pred, target } => {
                let p = self.data(*pred);
                let n = p.len() as f64;
                for ((o, pv), tv) in self.slot(lower, *pred).iter_mut().zip(p).zip(target) {
                    *o += g[0] * 2.0 * (pv - tv) / n;
                }
            }
            Op::MaeMean { pred, target } => {
                let p = self.data(*pred);
                let n = p.len() as f64;
                for ((o, pv), tv) in self.slot(lower, *pred).iter_mut().zip(p).zip(target) {
                    let d = pv - tv;
                    if d != 0.0 {
                        *o += g[0] * d.signum() / n;
                    }
                }
            }
            Op::HingeMean(a) => {
                let x = self.data(*a);
                let n = x.len() as f64;
                for (o, xv) in self.slot(lower, *a).iter_mut().zip(x) {
                    if *xv > 0.0 {
                        *o += g[0] / n;
                    }
                }
            }
            Op::LstmGates { z, state } => {
                let hidden = g.len() / 2;
                let zd = self.data(*z);
                let sd = self.data(*state);
                let mut dz = vec![0.0; 4 * hidden];
                let mut dc_prev = vec![0.0; hidden];
                for k in 0..hidden {
                    let i = sigmoid(zd[k]);
                    let f = sigmoid(zd[hidden + k]);
                    let gg = zd[2 * hidden + k].tanh();
                    let o = sigmoid(zd[3 * hidden + k]);
                    let c = y[hidden + k];
                    let tc = c.tanh();
                    let gh = g[k];
                    let dc = g[hidden + k] + gh * o * (1.0 - tc * tc);
                    dz[k] = dc * gg * i * (1.0 - i);
                    dz[hidden + k] = dc * sd[hidden + k] * f * (1.0 - f);
                    dz[2 * hidden + k] = dc * i * (1.0 - gg * gg);
                    dz[3 * hidden + k] = gh * tc * o * (1.0 - o);
                    dc_prev[k] = dc * f;
                }
                for (o, d) in self.slot(lower, *z).iter_mut().zip(&dz) {
                    *o += d;
                }
                for (o, d) in self.slot(lower, *state)[hidden..].iter_mut().zip(&dc_prev) {
                    *o += d;
                }
            }
            Op::AttnScore { wb, bb, wa, ba, h } => {
                let gs = g[0];
                let n = self.nodes[*h].value.len();
                let m = self.nodes[*bb].value.len();
                let (wbd, bbd, wad, hd) = (self.data(*wb), self.data(*bb), self.data(*wa), self.data(*h));
                let mut du = vec![0.0; m];
                let mut pre = vec![0.0; m];
                for r in 0..m {
                    let u = bbd[r] + wbd[r * n..(r + 1) * n].iter().zip(hd).map(|(a, b)| a * b).sum::<f64>();
                    pre[r] = u;
                    if u > 0.0 {
                        du[r] = gs * wad[r];
                    }
                }
                self.slot(lower, *ba)[0] += gs;
                for (o, u) in self.slot(lower, *wa).iter_mut().zip(&pre) {
                    if *u > 0.0 {
                        *o += gs * u;
                    }
                }
                for (o, d) in self.slot(lower, *bb).iter_mut().zip(&du) {
                    *o += d;
                }
                {
                    let gw = self.slot(lower, *wb);
                    for (r, d) in du.iter().enumerate() {
                        if *d != 0.0 {
                            for (o, x) in gw[r * n..(r + 1) * n].iter_mut().zip(hd) {
                                *o += d * x;
                            }
                        }
                    }
                }
                let gh = self.slot(lower, *h);
                for (r, d) in du.iter().enumerate() {
                    if *d != 0.0 {
                        for (o, w) in gh.iter_mut().zip(&wbd[r * n..(r + 1) * n]) {
                            *o += d * w;
                        }
                    }
                }
            }
            Op::Variance(a) => {
                let x = self.data(*a);
                let n = x.len() as f64;
                let m = x.iter().sum::<f64>() / n;
                for (o, xv) in self.slot(lower, *a).iter_mut().zip(x) {
                    *o += g[0] * 2.0 * (xv - m) / n;
                }
            }
        }
    }
}

/// Smooth-L1 of a residual `d`.
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
