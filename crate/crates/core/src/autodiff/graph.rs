//! Eager tape: every op is evaluated as it is recorded, and `forward_backward`
//! walks the tape in reverse to accumulate gradients into parameter leaves.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    Gather { a: usize, rows: Vec<usize> },
    Concat { parts: Vec<usize> },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    L1 { a: usize, target: Tensor<T> },
    Giou { a: usize, target: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1 { .. } => "l1",
            Op::Giou { .. } => "giou_loss",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// order is topological by construction.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Parameter leaves in registration order; gradients come back in the
    /// same order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Param, value, true);
        self.params.push(id);
        id
    }

    /// `a · b` for 2-D operands, or `a · bᵀ` when `trans_b` is set.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (av.rows(), av.cols());
        let (bk, m) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        assert_eq!(k, bk, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = Tensor::zeros(&[n, m]);
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (m as isize, 1) };
        T::gemm(
            n,
            k,
            m,
            T::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            rsb,
            csb,
            T::zero(),
            out.data_mut(),
            m as isize,
            1,
        );
        let rg = self.rg(&[a.0, b.0]);
        self.push(
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            out,
            rg,
        )
    }

    /// Elementwise sum; `b` may also be a row vector broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = av.clone();
        if av.shape() == bv.shape() {
            out.add_assign(bv);
        } else {
            assert_eq!(
                bv.len(),
                av.cols(),
                "add broadcast {:?} + {:?}",
                av.shape(),
                bv.shape()
            );
            let c = av.cols();
            for row in out.data_mut().chunks_mut(c) {
                for (x, &y) in row.iter_mut().zip(bv.data()) {
                    *x = *x + y;
                }
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(Op::Add { a: a.0, b: b.0 }, out, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0, b.0]);
        self.push(Op::Mul { a: a.0, b: b.0 }, out, rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let out = self.nodes[a.0].value.map(|v| v * factor);
        let rg = self.rg(&[a.0]);
        self.push(Op::Scale { a: a.0, factor }, out, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.map(|v| v.max(T::zero()));
        let rg = self.rg(&[a.0]);
        self.push(Op::Relu(a.0), out, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0]
            .value
            .map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[a.0]);
        self.push(Op::Sigmoid(a.0), out, rg)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let mut out = av.clone();
        let c = av.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a.0]);
        self.push(Op::Softmax(a.0), out, rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let c = xv.cols();
        assert!(gv.len() == c && bv.len() == c, "layer_norm params");
        let n = xv.rows();
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = Tensor::zeros(xv.shape());
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_c;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_c;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out.data_mut()[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            out,
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |s, &v| s + v);
        let rg = self.rg(&[a.0]);
        self.push(Op::Sum(a.0), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let s = av.data().iter().fold(T::zero(), |s, &v| s + v) / T::of(av.len() as f64);
        let rg = self.rg(&[a.0]);
        self.push(Op::Mean(a.0), Tensor::scalar(s), rg)
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let av = &self.nodes[a.0].value;
        let c = av.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert!(r < av.rows(), "gather row {r} out of {}", av.rows());
            data.extend_from_slice(av.row(r));
        }
        let out = Tensor::new(vec![rows.len(), c], data).expect("gather shape");
        let rg = self.rg(&[a.0]);
        self.push(
            Op::Gather {
                a: a.0,
                rows: rows.to_vec(),
            },
            out,
            rg,
        )
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), c, "concat column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, c], data).expect("concat shape");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(Op::Concat { parts: ids }, out, rg)
    }

    /// `Σᵢ wᵢ · (−log softmax(logitsᵢ)[targetᵢ])`, fused for stability.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[T]) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        let (n, c) = (lv.rows(), lv.cols());
        assert!(targets.len() == n && weights.len() == n, "cross_entropy sizes");
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
            assert!(targets[i] < c, "target class {} >= {c}", targets[i]);
            total = total + weights[i] * (lse - row[targets[i]]);
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[logits.0]);
        self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Tensor::scalar(total),
            rg,
        )
    }

    /// `Σ |a − target|` against a constant target of the same shape.
    pub fn l1(&mut self, a: NodeId, target: Tensor<T>) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape(), target.shape(), "l1 shapes");
        let s = av
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |s, (&x, &t)| s + (x - t).abs());
        let rg = self.rg(&[a.0]);
        self.push(Op::L1 { a: a.0, target }, Tensor::scalar(s), rg)
    }

    /// `Σ (1 − GIoU)` between rows of `a` and constant target rows, both in
    /// (cx, cy, w, h) layout.
    pub fn giou_loss(&mut self, a: NodeId, target: Tensor<T>) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert!(av.cols() == 4 && av.shape() == target.shape(), "giou shapes");
        let mut s = T::zero();
        for i in 0..av.rows() {
            let (_, giou) = crate::boxops::iou_giou_cxcywh(av.row(i), target.row(i));
            s = s + (T::one() - giou);
        }
        let rg = self.rg(&[a.0]);
        self.push(Op::Giou { a: a.0, target }, Tensor::scalar(s), rg)
    }

    /// First node holding a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| !n.value.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                node: i,
                op: self.nodes[i].op.name(),
            }),
            None => Ok(()),
        }
    }

    /// Evaluated loss plus ∂loss/∂param for every parameter leaf, in
    /// registration order.
    pub fn forward_backward(&self, loss: NodeId) -> Result<(T, Vec<Tensor<T>>)> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let out = self
            .params
            .iter()
            .map(|p| {
                grads
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p.0].value.shape()))
            })
            .collect::<Vec<_>>();
        if let Some(bad) = out.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                node: self.params[bad].0,
                op: "param gradient",
            });
        }
        Ok((lv.item(), out))
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k) = (av.rows(), av.cols());
                let m = node.value.cols();
                if needs(*a) {
                    // dA = dC · Bᵀ (logical B is k×m)
                    let mut da = Tensor::zeros(av.shape());
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, m as isize) };
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g.data(),
                        m as isize,
                        1,
                        bv.data(),
                        rs,
                        cs,
                        T::zero(),
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    // d(logical B) = Aᵀ · dC, written back in B's storage layout
                    let mut db = Tensor::zeros(bv.shape());
                    let (rsc, csc) = if *trans_b { (1, k as isize) } else { (m as isize, 1) };
                    T::gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        g.data(),
                        m as isize,
                        1,
                        T::zero(),
                        db.data_mut(),
                        rsc,
                        csc,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    let bv = &self.nodes[*b].value;
                    if bv.shape() == g.shape() {
                        accumulate(grads, *b, g.clone());
                    } else {
                        let c = g.cols();
                        let mut db = Tensor::zeros(bv.shape());
                        for row in g.data().chunks(c) {
                            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if needs(*a) {
                    accumulate(grads, *a, zip_map(g, bv, |gv, y| gv * y));
                }
                if needs(*b) {
                    accumulate(grads, *b, zip_map(g, av, |gv, x| gv * x));
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::Relu(a) => {
                let av = &self.nodes[*a].value;
                accumulate(
                    grads,
                    *a,
                    zip_map(g, av, |gv, x| if x > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::Sigmoid(a) => {
                accumulate(
                    grads,
                    *a,
                    zip_map(g, &node.value, |gv, y| gv * y * (T::one() - y)),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut da = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for j in 0..c {
                        da.data_mut()[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = &self.nodes[*gamma].value;
                let c = gv.len();
                let n = node.value.rows();
                if needs(*gamma) || needs(*beta) {
                    let mut dg = Tensor::zeros(gv.shape());
                    let mut db = Tensor::zeros(gv.shape());
                    for r in 0..n {
                        for j in 0..c {
                            let d = g.data()[r * c + j];
                            dg.data_mut()[j] = dg.data()[j] + d * xhat[r * c + j];
                            db.data_mut()[j] = db.data()[j] + d;
                        }
                    }
                    if needs(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if needs(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if needs(*x) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut dx = Tensor::zeros(node.value.shape());
                    for r in 0..n {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let dh = g.data()[r * c + j] * gv.data()[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat[r * c + j];
                        }
                        for j in 0..c {
                            let dh = g.data()[r * c + j] * gv.data()[j];
                            dx.data_mut()[r * c + j] =
                                rstd[r] * (dh - s1 * inv_c - xhat[r * c + j] * s2 * inv_c);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                let shape = self.nodes[*a].value.shape().to_vec();
                let len = self.nodes[*a].value.len();
                accumulate(grads, *a, Tensor::new(shape, vec![gv; len]).expect("shape"));
            }
            Op::Mean(a) => {
                let av = &self.nodes[*a].value;
                let gv = g.item() / T::of(av.len() as f64);
                let t = Tensor::new(av.shape().to_vec(), vec![gv; av.len()]).expect("shape");
                accumulate(grads, *a, t);
            }
            Op::Gather { a, rows } => {
                let av = &self.nodes[*a].value;
                let c = av.cols();
                let mut da = Tensor::zeros(av.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        da.data_mut()[r * c + j] = da.data()[r * c + j] + g.data()[k * c + j];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    let len = pv.len();
                    if needs(p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        accumulate(grads, p, Tensor::new(pv.shape().to_vec(), slice).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let lv = &self.nodes[*logits].value;
                let c = lv.cols();
                let gv = g.item();
                let mut d = Tensor::new(lv.shape().to_vec(), probs.clone()).expect("shape");
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut d.data_mut()[r * c..(r + 1) * c];
                    row[t] = row[t] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * w * gv;
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::L1 { a, target } => {
                let av = &self.nodes[*a].value;
                let gv = g.item();
                let d = zip_map(av, target, |x, t| {
                    if x > t {
                        gv
                    } else if x < t {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Giou { a, target } => {
                let av = &self.nodes[*a].value;
                let gv = g.item();
                let mut d = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let dr = giou_loss_grad(av.row(r), target.row(r));
                    for j in 0..4 {
                        d.data_mut()[r * 4 + j] = dr[j] * gv;
                    }
                }
                accumulate(grads, *a, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// ∂(1 − GIoU)/∂(cx, cy, w, h) of the predicted box.
fn giou_loss_grad<T: Scalar>(p: &[T], t: &[T]) -> [T; 4] {
    let half = T::of(0.5);
    let (px0, px1) = (p[0] - half * p[2], p[0] + half * p[2]);
    let (py0, py1) = (p[1] - half * p[3], p[1] + half * p[3]);
    let (tx0, tx1) = (t[0] - half * t[2], t[0] + half * t[2]);
    let (ty0, ty1) = (t[1] - half * t[3], t[1] + half * t[3]);
    let zero = T::zero();

    let iw = (px1.min(tx1) - px0.max(tx0)).max(zero);
    let ih = (py1.min(ty1) - py0.max(ty0)).max(zero);
    let inter = iw * ih;
    let ap = (px1 - px0) * (py1 - py0);
    let at = (tx1 - tx0) * (ty1 - ty0);
    let union = ap + at - inter;
    let ew = px1.max(tx1) - px0.min(tx0);
    let eh = py1.max(ty1) - py0.min(ty0);
    let encl = ew * eh;

    // loss = 2 − inter/union − union/encl
    let mut g_inter = -T::one() / union;
    let g_union = inter / (union * union) - T::one() / encl;
    let g_encl = union / (encl * encl);
    g_inter = g_inter - g_union;
    let g_ap = g_union;

    let (mut gx0, mut gx1, mut gy0, mut gy1) = (zero, zero, zero, zero);
    gx1 = gx1 + g_ap * (py1 - py0);
    gx0 = gx0 - g_ap * (py1 - py0);
    gy1 = gy1 + g_ap * (px1 - px0);
    gy0 = gy0 - g_ap * (px1 - px0);

    if iw > zero && ih > zero {
        let (g_iw, g_ih) = (g_inter * ih, g_inter * iw);
        if px1 <= tx1 {
            gx1 = gx1 + g_iw;
        }
        if px0 >= tx0 {
            gx0 = gx0 - g_iw;
        }
        if py1 <= ty1 {
            gy1 = gy1 + g_ih;
        }
        if py0 >= ty0 {
            gy0 = gy0 - g_ih;
        }
    }

    let (g_ew, g_eh) = (g_encl * eh, g_encl * ew);
    if px1 >= tx1 {
        gx1 = gx1 + g_ew;
    }
    if px0 <= tx0 {
        gx0 = gx0 - g_ew;
    }
    if py1 >= ty1 {
        gy1 = gy1 + g_eh;
    }
    if py0 <= ty0 {
        gy0 = gy0 - g_eh;
    }

    [
        gx0 + gx1,
        gy0 + gy1,
        half * (gx1 - gx0),
        half * (gy1 - gy0),
    ]
}
