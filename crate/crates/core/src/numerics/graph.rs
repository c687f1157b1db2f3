//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every op computes its value eagerly and, when any input requires a
//! gradient, records enough state to run its vector-Jacobian product later.
//! A `Graph` lives for one forward/backward pass and is confined to the
//! thread that built it. Shape errors inside ops are programming errors and
//! panic; user-facing validation happens before values reach the graph.

use rand::Rng;

use super::tensor::{gemm, log_softmax_in_place, softmax_in_place, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys a query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=memory + i`.
    Causal {
        memory: usize,
    },
}

impl AttnMask {
    fn allows(self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal { memory } => j <= memory + i,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddRow { a: Var, row: Var },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows { a: Var, temperature: f64 },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    MeanRows { a: Var },
    RowScale { a: Var, s: Var },
    Reshape { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Attention(Box<AttentionSaved>),
    LabelSmoothedNll { logits: Var, targets: Vec<usize>, eps: f64, probs: Vec<f64> },
    Sum { a: Var },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// Post-softmax probabilities, `[heads, lq, lk]`.
    probs: Vec<f64>,
    /// Inverted-dropout multipliers on `probs`, same layout, when active.
    drop: Option<Vec<f64>>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that never records; `param` leaves are treated as constants.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    /// Detached leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), (k, 1), self.data(b), (n, 1), 0.0, &mut out, (n, 1));
        self.push(Tensor::new(vec![m, n], out).unwrap(), &[a, b], Op::MatMul { a, b })
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), (k, 1), self.data(b), (1, k), 0.0, &mut out, (n, 1));
        self.push(Tensor::new(vec![m, n], out).unwrap(), &[a, b], Op::MatMulBt { a, b })
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        assert_eq!(k, k2, "linear: input width {k} vs weight rows {k2}");
        let mut out = match b {
            Some(b) => {
                let bias = self.data(b);
                assert_eq!(bias.len(), n, "linear: bias length");
                let mut o = Vec::with_capacity(m * n);
                for _ in 0..m {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![0.0; m * n],
        };
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(m, k, n, 1.0, self.data(x), (k, 1), self.data(w), (n, 1), beta, &mut out, (n, 1));
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(vec![m, n], out).unwrap(), &inputs, Op::Linear { x, w, b })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.len(), vb.len(), "elementwise op: {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect()).unwrap();
        self.push(t, &[a], Op::Scale { a, c })
    }

    /// Broadcast-add a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.dims(a);
        let r = self.data(row);
        assert_eq!(r.len(), n, "add_row: width");
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += x;
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), &[a, row], Op::AddRow { a, row })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push(t, &[a], Op::Gelu { a })
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        assert!(g.len() == n && b.len() == n, "layer_norm: parameter width");
        let xs = self.data(x);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Var {
        assert!(temperature > 0.0, "softmax temperature must be positive");
        let (m, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            softmax_in_place(&mut out[i * n..(i + 1) * n], temperature);
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), &[a], Op::SoftmaxRows { a, temperature })
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, n) = self.dims(table);
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < rows, "gather_rows: index {id} >= {rows}");
            out.extend_from_slice(&t[id * n..(id + 1) * n]);
        }
        let value = Tensor::new(vec![ids.len(), n], out).expect("gather_rows: empty index list");
        self.push(value, &[table], Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        if parts.len() == 1 {
            return parts[0];
        }
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            assert_eq!(c, n, "concat_rows: width mismatch");
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        self.push(Tensor::new(vec![rows, n], out).unwrap(), parts, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, _) = self.dims(a);
        assert!(len > 0 && start + len <= m, "slice_rows: {start}+{len} > {m}");
        let t = self.value(a).slice_rows(start, len);
        self.push(t, &[a], Op::SliceRows { a, start })
    }

    /// Column means, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let d = self.data(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Tensor::new(vec![1, n], out).unwrap(), &[a], Op::MeanRows { a })
    }

    /// Multiply row `i` of `a` by `s[i]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = self.dims(a);
        let sv = self.data(s);
        assert_eq!(sv.len(), m, "row_scale: one factor per row");
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o *= sv[i];
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), &[a, s], Op::RowScale { a, s })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = Tensor::new(shape.to_vec(), self.data(a).to_vec()).expect("reshape: element count");
        self.push(t, &[a], Op::Reshape { a })
    }

    /// Inverted dropout. Identity when `p == 0` or the graph is not recording.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 || !self.grad_enabled {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push(t, &[a], Op::Dropout { a, mask })
    }

    /// Multi-head scaled dot-product attention on `[len, d]` projections.
    ///
    /// Heads are contiguous column blocks of width `d / heads`. Optional
    /// attention dropout is applied to the post-softmax probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        dropout: f64,
        rng: &mut R,
    ) -> Var {
        let (lq, d) = self.dims(q);
        let (lk, dk) = self.dims(k);
        let (lv, dv) = self.dims(v);
        assert!(d == dk && d == dv && lk == lv, "attention: incompatible q/k/v shapes");
        assert!(heads > 0 && d % heads == 0, "attention: width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * lq * lk];
        let use_drop = dropout > 0.0 && self.grad_enabled;
        let drop = use_drop.then(|| {
            let keep = 1.0 / (1.0 - dropout);
            (0..heads * lq * lk).map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { keep }).collect::<Vec<f64>>()
        });
        let mut out = vec![0.0; lq * d];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut weighted = vec![0.0; lq * lk];
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            gemm(lq, dh, lk, scale, &qd[h * dh..], (d, 1), &kd[h * dh..], (1, d), 0.0, p, (lk, 1));
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                for (j, x) in row.iter_mut().enumerate() {
                    if !mask.allows(i, j) {
                        *x = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row, 1.0);
            }
            let pw: &[f64] = match &drop {
                Some(dm) => {
                    let dm = &dm[h * lq * lk..(h + 1) * lq * lk];
                    for ((w, x), m) in weighted.iter_mut().zip(p.iter()).zip(dm) {
                        *w = x * m;
                    }
                    &weighted
                }
                None => p,
            };
            gemm(lq, lk, dh, 1.0, pw, (lk, 1), &vd[h * dh..], (d, 1), 0.0, &mut out[h * dh..], (d, 1));
        }
        let saved = AttentionSaved { q, k, v, heads, probs, drop };
        self.push(Tensor::new(vec![lq, d], out).unwrap(), &[q, k, v], Op::Attention(Box::new(saved)))
    }

    /// Mean over positions of label-smoothed cross-entropy.
    ///
    /// The smoothed target puts `1 - eps` on the gold id and spreads `eps`
    /// evenly over the other `V - 1` ids; `eps = 0` is plain NLL.
    pub fn label_smoothed_nll(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let (l, vocab) = self.dims(logits);
        if targets.len() != l {
            return Err(Error::Shape(format!("{} targets for {l} logit rows", targets.len())));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidInput(format!("label smoothing must be in [0,1), got {eps}")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, size: vocab });
        }
        let off = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
        let on = if vocab > 1 { 1.0 - eps } else { 1.0 };
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            log_softmax_in_place(row);
            let sum_all: f64 = row.iter().sum();
            let nll = -row[t];
            let other = -(sum_all - row[t]);
            total += on * nll + off * other;
            for x in row.iter_mut() {
                *x = x.exp();
            }
        }
        let loss = total / l as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::LabelSmoothedNll { logits, targets: targets.to_vec(), eps, probs },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum { a })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Leaves that do not require gradients (constants, detached values)
    /// simply receive nothing; `Gradients::get_or_zeros` reports zeros for them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            // Keep the gradient for inspection of intermediate values.
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if rg(*a) {
                    let ga = acc(grads, *a, m * k);
                    gemm(m, n, k, 1.0, gout, (n, 1), self.data(*b), (1, n), 1.0, ga, (k, 1));
                }
                if rg(*b) {
                    let gb = acc(grads, *b, k * n);
                    gemm(k, m, n, 1.0, self.data(*a), (1, k), gout, (n, 1), 1.0, gb, (n, 1));
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if rg(*a) {
                    let ga = acc(grads, *a, m * k);
                    gemm(m, n, k, 1.0, gout, (n, 1), self.data(*b), (k, 1), 1.0, ga, (k, 1));
                }
                if rg(*b) {
                    let gb = acc(grads, *b, n * k);
                    gemm(n, m, k, 1.0, gout, (1, n), self.data(*a), (k, 1), 1.0, gb, (k, 1));
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.dims(*x);
                let n = self.dims(*w).1;
                if rg(*x) {
                    let gx = acc(grads, *x, m * k);
                    gemm(m, n, k, 1.0, gout, (n, 1), self.data(*w), (1, n), 1.0, gx, (k, 1));
                }
                if rg(*w) {
                    let gw = acc(grads, *w, k * n);
                    gemm(k, m, n, 1.0, self.data(*x), (1, k), gout, (n, 1), 1.0, gw, (n, 1));
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let gb = acc(grads, *b, n);
                        for i in 0..m {
                            for (g, o) in gb.iter_mut().zip(&gout[i * n..(i + 1) * n]) {
                                *g += o;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        add_into(acc(grads, v, gout.len()), gout);
                    }
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    add_into(acc(grads, *a, gout.len()), gout);
                }
                if rg(*b) {
                    for (g, o) in acc(grads, *b, gout.len()).iter_mut().zip(gout) {
                        *g -= o;
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let bv = self.data(*b);
                    for ((g, o), y) in acc(grads, *a, gout.len()).iter_mut().zip(gout).zip(bv) {
                        *g += o * y;
                    }
                }
                if rg(*b) {
                    let av = self.data(*a);
                    for ((g, o), x) in acc(grads, *b, gout.len()).iter_mut().zip(gout).zip(av) {
                        *g += o * x;
                    }
                }
            }
            Op::Scale { a, c } => {
                for (g, o) in acc(grads, *a, gout.len()).iter_mut().zip(gout) {
                    *g += o * c;
                }
            }
            Op::AddRow { a, row } => {
                let (m, n) = self.dims(*a);
                if rg(*a) {
                    add_into(acc(grads, *a, gout.len()), gout);
                }
                if rg(*row) {
                    let gr = acc(grads, *row, n);
                    for i in 0..m {
                        add_into(gr, &gout[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.data(*a);
                for ((g, o), xi) in acc(grads, *a, gout.len()).iter_mut().zip(gout).zip(x) {
                    *g += o * gelu_grad(*xi);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = self.dims(*x);
                let gv = self.data(*gamma);
                if rg(*gamma) {
                    let gg = acc(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gout[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = acc(grads, *beta, n);
                    for i in 0..m {
                        add_into(gb, &gout[i * n..(i + 1) * n]);
                    }
                }
                if rg(*x) {
                    let gx = acc(grads, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dxhat[j] = gout[i * n + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[i * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::SoftmaxRows { a, temperature } => {
                let (m, n) = self.dims(*a);
                let y = node.value.data();
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gout[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        ga[i * n + j] += yr[j] * (gr[j] - dot) / temperature;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let (rows, n) = self.dims(*table);
                let gt = acc(grads, *table, rows * n);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * n..(id + 1) * n], &gout[i * n..(i + 1) * n]);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if rg(p) {
                        add_into(acc(grads, p, len), &gout[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let (m, n) = self.dims(*a);
                let ga = acc(grads, *a, m * n);
                add_into(&mut ga[start * n..start * n + gout.len()], gout);
            }
            Op::MeanRows { a } => {
                let (m, n) = self.dims(*a);
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += gout[j] / m as f64;
                    }
                }
            }
            Op::RowScale { a, s } => {
                let (m, n) = self.dims(*a);
                if rg(*a) {
                    let sv = self.data(*s);
                    let ga = acc(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gout[i * n + j] * sv[i];
                        }
                    }
                }
                if rg(*s) {
                    let av = self.data(*a);
                    let gs = acc(grads, *s, m);
                    for i in 0..m {
                        gs[i] += (0..n).map(|j| gout[i * n + j] * av[i * n + j]).sum::<f64>();
                    }
                }
            }
            Op::Reshape { a } => add_into(acc(grads, *a, gout.len()), gout),
            Op::Dropout { a, mask } => {
                for ((g, o), mk) in acc(grads, *a, gout.len()).iter_mut().zip(gout).zip(mask) {
                    *g += o * mk;
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, gout, grads),
            Op::LabelSmoothedNll { logits, targets, eps, probs } => {
                let (l, vocab) = self.dims(*logits);
                let off = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
                let on = if vocab > 1 { 1.0 - eps } else { 1.0 };
                let scale = gout[0] / l as f64;
                let gl = acc(grads, *logits, l * vocab);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..vocab {
                        let q = if j == t { on } else { off };
                        gl[i * vocab + j] += scale * (probs[i * vocab + j] - q);
                    }
                }
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                for g in acc(grads, *a, len).iter_mut() {
                    *g += gout[0];
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (lq, d) = self.dims(s.q);
        let lk = self.dims(s.k).0;
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(s.q), self.data(s.k), self.data(s.v));
        let mut gq = vec![0.0; lq * d];
        let mut gk = vec![0.0; lk * d];
        let mut gv = vec![0.0; lk * d];
        let mut dp = vec![0.0; lq * lk];
        let mut pw = vec![0.0; lq * lk];
        for h in 0..s.heads {
            let p = &s.probs[h * lq * lk..(h + 1) * lq * lk];
            let dm = s.drop.as_ref().map(|dm| &dm[h * lq * lk..(h + 1) * lq * lk]);
            let weighted: &[f64] = match dm {
                Some(dm) => {
                    for ((w, x), m) in pw.iter_mut().zip(p).zip(dm) {
                        *w = x * m;
                    }
                    &pw
                }
                None => p,
            };
            // dV_h += Pᵀ dO_h
            gemm(lk, lq, dh, 1.0, weighted, (1, lk), &gout[h * dh..], (d, 1), 1.0, &mut gv[h * dh..], (d, 1));
            // dP = dO_h V_hᵀ
            gemm(lq, dh, lk, 1.0, &gout[h * dh..], (d, 1), &vd[h * dh..], (1, d), 0.0, &mut dp, (lk, 1));
            if let Some(dm) = dm {
                for (x, m) in dp.iter_mut().zip(dm) {
                    *x *= m;
                }
            }
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut dp[i * lk..(i + 1) * lk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            // dQ_h += dS K_h ; dK_h += dSᵀ Q_h
            gemm(lq, lk, dh, 1.0, &dp, (lk, 1), &kd[h * dh..], (d, 1), 1.0, &mut gq[h * dh..], (d, 1));
            gemm(lk, lq, dh, 1.0, &dp, (1, lk), &qd[h * dh..], (d, 1), 1.0, &mut gk[h * dh..], (d, 1));
        }
        for (v, g) in [(s.q, gq), (s.k, gk), (s.v, gv)] {
            if self.nodes[v.0].requires_grad {
                add_into(acc(grads, v, g.len()), &g);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
