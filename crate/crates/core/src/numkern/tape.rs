//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the list in reverse and sums path gradients into each tracked leaf. A tape
//! is single-threaded and single-use: build, sweep, drop.

use super::kernels::{self, MaskedSoftmax};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var },
    MatVec { w: Var, x: Var },
    VecMat { x: Var, w: Var },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRows { x: Var, b: Var },
    Scale(Var, f64),
    Sum(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Softmax(Var),
    MaskedSoftmax { e: Var, m: Var, plain: Vec<f64>, mass: f64, degenerate: bool },
    SoftmaxNll { logits: Var, target: usize, probs: Vec<f64> },
    GatherRow { table: Var, row: usize },
    Bce { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor shaped like `like`, zeros when unreached.
    pub fn tensor(&self, v: Var, like: &Tensor) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::from_parts_unchecked(like.shape().to_vec(), g.to_vec()),
            None => like.zeros_like(),
        }
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Constant, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(data, vec![n], Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts_unchecked(n.shape.clone(), n.value.clone())
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a matrix, got {}", shape_str(s)))),
        }
    }

    fn vector_len(&self, v: Var, op: &'static str) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            s => Err(Error::dim(op, format!("expected a vector, got {}", shape_str(s)))),
        }
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{} · {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, bb) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * bb;
                }
            }
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b }, tracked))
    }

    /// `[m×k] · [k] → [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(w, "matvec")?;
        let kx = self.vector_len(x, "matvec")?;
        if k != kx {
            return Err(Error::dim(
                "matvec",
                format!("{} · {}", shape_str(self.shape(w)), shape_str(self.shape(x))),
            ));
        }
        let out = kernels::matvec(self.value(w), m, k, self.value(x));
        let tracked = self.tracked(&[w, x]);
        Ok(self.push(out, vec![m], Op::MatVec { w, x }, tracked))
    }

    /// `[m] · [m×n] → [n]` (weighted sum of rows).
    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(w, "vecmat")?;
        let mx = self.vector_len(x, "vecmat")?;
        if m != mx {
            return Err(Error::dim(
                "vecmat",
                format!("{} · {}", shape_str(self.shape(x)), shape_str(self.shape(w))),
            ));
        }
        let out = kernels::vecmat(self.value(x), self.value(w), m, n);
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(out, vec![n], Op::VecMat { x, w }, tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, vec![c, r], Op::Transpose(a), tracked))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        self.push(out, shape, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds vector `b` (length n) to every row of matrix `x` (`r×n`).
    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, n) = self.matrix_dims(x, "add_rows")?;
        let nb = self.vector_len(b, "add_rows")?;
        if n != nb {
            return Err(Error::dim(
                "add_rows",
                format!("{} + {}", shape_str(self.shape(x)), shape_str(self.shape(b))),
            ));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let tracked = self.tracked(&[x, b]);
        Ok(self.push(out, vec![r, n], Op::AddRows { x, b }, tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(out, shape, Op::Scale(a, c), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(vec![s], vec![1], Op::Sum(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(out, shape, Op::Sigmoid(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(out, shape, Op::Tanh(a), tracked)
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            self.vector_len(p, "concat")?;
            out.extend_from_slice(self.value(p));
        }
        if out.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let n = out.len();
        let tracked = self.tracked(parts);
        Ok(self.push(out, vec![n], Op::Concat(parts.to_vec()), tracked))
    }

    /// `x[start..start+len]` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.vector_len(x, "slice")?;
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} of length {n}", start + len),
            ));
        }
        let out = self.value(x)[start..start + len].to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, vec![len], Op::Slice { x, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{} to {}", shape_str(self.shape(x)), shape_str(shape)),
            ));
        }
        let out = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), tracked))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.vector_len(x, "softmax")?;
        let out = kernels::softmax(self.value(x));
        let n = out.len();
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, vec![n], Op::Softmax(x), tracked))
    }

    /// Masked softmax over logits `e` with per-slot mask values `m`.
    /// Returns the weights and whether the degenerate fallback fired.
    pub fn masked_softmax(&mut self, e: Var, m: Var) -> Result<(Var, bool)> {
        self.vector_len(e, "masked_softmax")?;
        self.same_shape(e, m, "masked_softmax")?;
        let MaskedSoftmax {
            weights,
            plain,
            mass,
            degenerate,
        } = kernels::masked_softmax(self.value(e), self.value(m));
        let n = weights.len();
        let tracked = self.tracked(&[e, m]);
        let v = self.push(
            weights,
            vec![n],
            Op::MaskedSoftmax {
                e,
                m,
                plain,
                mass,
                degenerate,
            },
            tracked,
        );
        Ok((v, degenerate))
    }

    /// `-log softmax(logits)[target]`, fused for stability.
    pub fn softmax_nll(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.vector_len(logits, "softmax_nll")?;
        if target >= n {
            return Err(Error::dim(
                "softmax_nll",
                format!("target {target} out of {n} classes"),
            ));
        }
        let lsm = kernels::log_softmax(self.value(logits));
        let loss = -lsm[target];
        let probs = lsm.iter().map(|v| v.exp()).collect();
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SoftmaxNll {
                logits,
                target,
                probs,
            },
            tracked,
        ))
    }

    /// Row `row` of a matrix, as a vector.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(table, "gather_row")?;
        if row >= r {
            return Err(Error::dim("gather_row", format!("row {row} of {r}")));
        }
        let out = self.value(table)[row * c..(row + 1) * c].to_vec();
        let tracked = self.tracked(&[table]);
        Ok(self.push(out, vec![c], Op::GatherRow { table, row }, tracked))
    }

    /// Summed binary cross-entropy of `pred` against fixed targets, with
    /// `pred` clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let n = self.vector_len(pred, "bce")?;
        if n != target.len() {
            return Err(Error::dim("bce", format!("pred {n} vs target {}", target.len())));
        }
        let loss = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let tracked = self.tracked(&[pred]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {}", shape_str(self.shape(loss))),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                // dA = dC · Bᵀ
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] +=
                                g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &mut |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (d, gg) in db[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += x * gg;
                            }
                        }
                    }
                });
            }
            Op::MatVec { w, x } => {
                let k = nodes[w.0].shape[1];
                let wv = &nodes[w.0].value;
                let xv = &nodes[x.0].value;
                acc(*w, &mut |dw| {
                    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(k)) {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (d, xx) in row.iter_mut().zip(xv) {
                            *d += gi * xx;
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    for (gi, row) in g.iter().zip(wv.chunks_exact(k)) {
                        for (d, ww) in dx.iter_mut().zip(row) {
                            *d += gi * ww;
                        }
                    }
                });
            }
            Op::VecMat { x, w } => {
                let n = nodes[w.0].shape[1];
                let wv = &nodes[w.0].value;
                let xv = &nodes[x.0].value;
                acc(*x, &mut |dx| {
                    for (d, row) in dx.iter_mut().zip(wv.chunks_exact(n)) {
                        *d += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                acc(*w, &mut |dw| {
                    for (xi, row) in xv.iter().zip(dw.chunks_exact_mut(n)) {
                        for (d, gg) in row.iter_mut().zip(g) {
                            *d += xi * gg;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |d| {
                    for ((x, gg), y) in d.iter_mut().zip(g).zip(bv) {
                        *x += gg * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gg), y) in d.iter_mut().zip(g).zip(av) {
                        *x += gg * y;
                    }
                });
            }
            Op::AddRows { x, b } => {
                let n = nodes[b.0].value.len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for row in g.chunks_exact(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| {
                for (x, gg) in d.iter_mut().zip(g) {
                    *x += c * gg;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |d| {
                for x in d.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for ((x, gg), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *x += gg * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |d| {
                for ((x, gg), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *x += gg * (1.0 - y * y);
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Slice { x, start } => {
                acc(*x, &mut |d| add_into(&mut d[*start..*start + g.len()], g));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Softmax(x) => {
                let y = &node.value;
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*x, &mut |d| {
                    for ((dx, gg), yy) in d.iter_mut().zip(g).zip(y) {
                        *dx += yy * (gg - dot);
                    }
                });
            }
            Op::MaskedSoftmax {
                e,
                m,
                plain,
                mass,
                degenerate,
            } => {
                let y = &node.value;
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*e, &mut |d| {
                    for ((dx, gg), yy) in d.iter_mut().zip(g).zip(y) {
                        *dx += yy * (gg - dot);
                    }
                });
                if !degenerate {
                    acc(*m, &mut |d| {
                        for ((dm, gg), a) in d.iter_mut().zip(g).zip(plain) {
                            *dm += a / mass * (gg - dot);
                        }
                    });
                }
            }
            Op::SoftmaxNll {
                logits,
                target,
                probs,
            } => acc(*logits, &mut |d| {
                for (j, (dx, p)) in d.iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    *dx += g[0] * (p - onehot);
                }
            }),
            Op::GatherRow { table, row } => {
                let c = g.len();
                acc(*table, &mut |d| add_into(&mut d[row * c..(row + 1) * c], g));
            }
            Op::Bce { pred, target } => {
                let pv = &nodes[pred.0].value;
                acc(*pred, &mut |d| {
                    for ((dx, &p), &t) in d.iter_mut().zip(pv).zip(target) {
                        if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        *dx += g[0] * ((1.0 - t) / (1.0 - p) - t / p);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
