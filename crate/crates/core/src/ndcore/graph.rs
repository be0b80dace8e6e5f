//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! value and the ids of its inputs. [`Graph::backward`] walks the list once in
//! reverse and returns gradients for every parameter that was read.

use std::collections::HashMap;
use std::sync::Arc;

use super::linalg::{self, gemm};
use super::params::{Gradients, ParamId, ParamStore};
use super::{NdError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Powf(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    GatherCols(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Cholesky(NodeId),
    SolveLower(NodeId, NodeId),
    Diag(NodeId),
    DiagEmbed(NodeId),
    SqDist(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    if a == b || b == 1 {
        a
    } else if a == 1 {
        b
    } else {
        panic!("cannot broadcast {a} against {b}")
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ra, ca) = dims(a);
    let (rb, cb) = dims(b);
    if ra == rb && ca == cb {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::mat(ra, ca, data);
    }
    let (r, c) = (broadcast_dim(ra, rb), broadcast_dim(ca, cb));
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i };
        let ib = if rb == 1 { 0 } else { i };
        for j in 0..c {
            let x = a.data()[ia * ca + if ca == 1 { 0 } else { j }];
            let y = b.data()[ib * cb + if cb == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Tensor::mat(r, c, out)
}

/// Sums a broadcast gradient back to the operand's shape.
fn reduce_to(grad: &[f64], out_rows: usize, out_cols: usize, rows: usize, cols: usize) -> Vec<f64> {
    if rows == out_rows && cols == out_cols {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; rows * cols];
    for i in 0..out_rows {
        let ii = if rows == 1 { 0 } else { i };
        for j in 0..out_cols {
            let jj = if cols == 1 { 0 } else { j };
            acc[ii * cols + jj] += grad[i * out_cols + j];
        }
    }
    acc
}

/// Operand value at the broadcast position `(i, j)` of the output.
#[inline]
fn bval(t: &Tensor, i: usize, j: usize) -> f64 {
    let (r, c) = dims(t);
    t.data()[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }]
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// A tape that records gradients for parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            grad_enabled: true,
        }
    }

    /// A tape for inference: parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Whether gradients can flow from `id` back to any parameter.
    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        dims(self.value(id))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Constant,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Reads a parameter. On an inference tape it behaves like a constant.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies the value of `id` into a new constant node, cutting the tape.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = Arc::clone(&self.nodes[id.0].value);
        self.nodes.push(Node {
            value: v,
            op: Op::Constant,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ---- elementwise binary (rank-2 broadcasting) ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p), &[a])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = linalg::matmul(self.value(a), self.value(b));
        self.push(v, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Lower Cholesky factor of a symmetric positive-definite node.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        let v = linalg::cholesky(self.value(a))?;
        Ok(self.push(v, Op::Cholesky(a), &[a]))
    }

    /// `X` solving `L X = B` with `L` lower triangular.
    pub fn solve_lower(&mut self, l: NodeId, b: NodeId) -> NodeId {
        let v = linalg::solve_lower(self.value(l), self.value(b));
        self.push(v, Op::SolveLower(l, b), &[l, b])
    }

    /// Diagonal of a square matrix as an `[n, 1]` column.
    pub fn diag(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = t.rows();
        let v: Vec<f64> = (0..n).map(|i| t.get(i, i)).collect();
        self.push(Tensor::mat(n, 1, v), Op::Diag(a), &[a])
    }

    /// Square matrix with the `[n, 1]` (or `[1, n]`) input on its diagonal.
    pub fn diag_embed(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = t.len();
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            out.set(i, i, t.data()[i]);
        }
        self.push(out, Op::DiagEmbed(a), &[a])
    }

    /// Pairwise squared Euclidean distances between the rows of `x` and `z`.
    pub fn sq_dist(&mut self, x: NodeId, z: NodeId) -> NodeId {
        let (xv, zv) = (self.value(x), self.value(z));
        let (m, d) = dims(xv);
        let (n, dz) = dims(zv);
        assert_eq!(d, dz, "sq_dist feature dimension");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xi = xv.row_slice(i);
            for j in 0..n {
                let zj = zv.row_slice(j);
                out[i * n + j] = xi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        self.push(Tensor::mat(m, n, out), Op::SqDist(x, z), &[x, z])
    }

    // ---- reductions and indexing ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (m, n) = dims(t);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        self.push(Tensor::mat(1, n, out), Op::SumRows(a), &[a])
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let m = t.rows();
        let out: Vec<f64> = (0..m).map(|i| t.row_slice(i).iter().sum()).collect();
        self.push(Tensor::mat(m, 1, out), Op::SumCols(a), &[a])
    }

    /// Picks column `idx[i]` from row `i`: `[m, n] -> [m, 1]`.
    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.rows(), idx.len(), "gather_cols index count");
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| t.get(i, j)).collect();
        self.push(Tensor::mat(idx.len(), 1, out), Op::GatherCols(a, idx.to_vec()), &[a])
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(a);
        let m = t.rows();
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        self.push(Tensor::mat(m, len, out), Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), m, "concat_cols row count");
                out.extend_from_slice(t.row_slice(i));
            }
        }
        self.push(Tensor::mat(m, total, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NdError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NdError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: HashMap<ParamId, Tensor> = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => match out.get_mut(pid) {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => {
                        let (r, c) = dims(y);
                        out.insert(*pid, Tensor::mat(r, c, g));
                    }
                },
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (r, c) = dims(y);
                    self.acc_reduced(&mut grads, *a, &g, r, c, 1.0);
                    self.acc_reduced(&mut grads, *b, &g, r, c, sign);
                }
                Op::Mul(a, b) => {
                    let (r, c) = dims(y);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let ga: Vec<f64> = (0..r * c).map(|k| g[k] * bval(bv, k / c, k % c)).collect();
                        self.acc_reduced(&mut grads, *a, &ga, r, c, 1.0);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb: Vec<f64> = (0..r * c).map(|k| g[k] * bval(av, k / c, k % c)).collect();
                        self.acc_reduced(&mut grads, *b, &gb, r, c, 1.0);
                    }
                }
                Op::Div(a, b) => {
                    let (r, c) = dims(y);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let ga: Vec<f64> = (0..r * c).map(|k| g[k] / bval(bv, k / c, k % c)).collect();
                        self.acc_reduced(&mut grads, *a, &ga, r, c, 1.0);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb: Vec<f64> = (0..r * c)
                            .map(|k| {
                                let (i, j) = (k / c, k % c);
                                let bb = bval(bv, i, j);
                                -g[k] * bval(av, i, j) / (bb * bb)
                            })
                            .collect();
                        self.acc_reduced(&mut grads, *b, &gb, r, c, 1.0);
                    }
                }
                Op::Neg(a) => self.acc_map(&mut grads, *a, &g, |gk, _| -gk),
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc_map(&mut grads, *a, &g, |gk, _| gk * s)
                }
                Op::AddScalar(a) => self.acc_map(&mut grads, *a, &g, |gk, _| gk),
                Op::Exp(a) => {
                    let yd = y.data();
                    self.acc_map(&mut grads, *a, &g, |gk, k| gk * yd[k])
                }
                Op::Log(a) => {
                    let xd = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gk, k| gk / xd[k])
                }
                Op::Relu(a) => {
                    let xd = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gk, k| if xd[k] > 0.0 { gk } else { 0.0 })
                }
                Op::Softplus(a) => {
                    let xd = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gk, k| gk * sigmoid(xd[k]))
                }
                Op::Sigmoid(a) => {
                    let yd = y.data();
                    self.acc_map(&mut grads, *a, &g, |gk, k| gk * yd[k] * (1.0 - yd[k]))
                }
                Op::Sqrt(a) => {
                    let yd = y.data();
                    self.acc_map(&mut grads, *a, &g, |gk, k| gk * 0.5 / yd[k])
                }
                Op::Square(a) => {
                    let xd = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gk, k| gk * 2.0 * xd[k])
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let xd = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |gk, k| gk * p * xd[k].powf(p - 1.0))
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = dims(av);
                    let n = bv.cols();
                    if self.nodes[a.0].needs_grad {
                        // dA = G B^T
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, 1.0, &g, false, bv.data(), true, 0.0, &mut ga);
                        Self::acc(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = A^T G
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, av.data(), true, &g, false, 0.0, &mut gb);
                        Self::acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = dims(y);
                    let gt = Tensor::mat(r, c, g).transpose().into_data();
                    Self::acc(&mut grads, *a, gt);
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).len();
                    Self::acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SumRows(a) => {
                    let (m, n) = dims(self.value(*a));
                    let ga: Vec<f64> = (0..m * n).map(|k| g[k % n]).collect();
                    Self::acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (m, n) = dims(self.value(*a));
                    let ga: Vec<f64> = (0..m * n).map(|k| g[k / n]).collect();
                    Self::acc(&mut grads, *a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let (m, n) = dims(self.value(*a));
                    let mut ga = vec![0.0; m * n];
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * n + j] += g[i];
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = dims(self.value(*a));
                    let len = y.cols();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        ga[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = dims(y);
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.nodes[p.0].needs_grad {
                            let mut gp = Vec::with_capacity(m * w);
                            for i in 0..m {
                                gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            Self::acc(&mut grads, *p, gp);
                        }
                        offset += w;
                    }
                }
                Op::Cholesky(a) => {
                    let l: &Tensor = y;
                    let n = l.rows();
                    // Phi = tril(L^T dL); symmetrize with halved diagonal.
                    let mut p = vec![0.0; n * n];
                    gemm(n, n, n, 1.0, l.data(), true, &g, false, 0.0, &mut p);
                    let mut sym = Tensor::zeros(n, n);
                    for i in 0..n {
                        for j in 0..=i {
                            let v = if i == j { 0.5 * p[i * n + i] } else { 0.5 * p[i * n + j] };
                            sym.set(i, j, v);
                            sym.set(j, i, v);
                        }
                    }
                    // dA = L^{-T} sym L^{-1}
                    let left = linalg::solve_lower_transpose(l, &sym);
                    let ga = linalg::solve_lower_transpose(l, &left.transpose()).transpose();
                    Self::acc(&mut grads, *a, ga.into_data());
                }
                Op::SolveLower(l, b) => {
                    let lv = self.value(*l);
                    let (n, m) = dims(y);
                    let gb = linalg::solve_lower_transpose(lv, &Tensor::mat(n, m, g));
                    if self.nodes[l.0].needs_grad {
                        let mut gl = vec![0.0; n * n];
                        gemm(n, m, n, -1.0, gb.data(), false, y.data(), true, 0.0, &mut gl);
                        let gl = linalg::tril(&Tensor::mat(n, n, gl));
                        Self::acc(&mut grads, *l, gl.into_data());
                    }
                    if self.nodes[b.0].needs_grad {
                        Self::acc(&mut grads, *b, gb.into_data());
                    }
                }
                Op::Diag(a) => {
                    let n = y.rows();
                    let mut ga = vec![0.0; n * n];
                    for i in 0..n {
                        ga[i * n + i] = g[i];
                    }
                    Self::acc(&mut grads, *a, ga);
                }
                Op::DiagEmbed(a) => {
                    let n = y.rows();
                    let ga: Vec<f64> = (0..n).map(|i| g[i * n + i]).collect();
                    Self::acc(&mut grads, *a, ga);
                }
                Op::SqDist(x, z) => {
                    let (xv, zv) = (self.value(*x), self.value(*z));
                    let (m, d) = dims(xv);
                    let n = zv.rows();
                    if self.nodes[x.0].needs_grad {
                        // dX_i = 2 (sum_j G_ij) x_i - 2 (G Z)_i
                        let mut gx = vec![0.0; m * d];
                        gemm(m, n, d, -2.0, &g, false, zv.data(), false, 0.0, &mut gx);
                        for i in 0..m {
                            let rs: f64 = g[i * n..(i + 1) * n].iter().sum();
                            for (o, xv) in gx[i * d..(i + 1) * d].iter_mut().zip(xv.row_slice(i)) {
                                *o += 2.0 * rs * xv;
                            }
                        }
                        Self::acc(&mut grads, *x, gx);
                    }
                    if self.nodes[z.0].needs_grad {
                        let mut gz = vec![0.0; n * d];
                        gemm(n, m, d, -2.0, &g, true, xv.data(), false, 0.0, &mut gz);
                        for j in 0..n {
                            let cs: f64 = (0..m).map(|i| g[i * n + j]).sum();
                            for (o, zv) in gz[j * d..(j + 1) * d].iter_mut().zip(zv.row_slice(j)) {
                                *o += 2.0 * cs * zv;
                            }
                        }
                        Self::acc(&mut grads, *z, gz);
                    }
                }
            }
        }
        Ok(Gradients::from_map(out))
    }

    fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64], f: impl Fn(f64, usize) -> f64) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let ga: Vec<f64> = g.iter().enumerate().map(|(k, &gk)| f(gk, k)).collect();
        Self::acc(grads, id, ga);
    }

    fn acc_reduced(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: NodeId,
        g: &[f64],
        out_rows: usize,
        out_cols: usize,
        sign: f64,
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let (r, c) = dims(self.value(id));
        let mut ga = reduce_to(g, out_rows, out_cols, r, c);
        if sign != 1.0 {
            for v in &mut ga {
                *v *= sign;
            }
        }
        Self::acc(grads, id, ga);
    }
}
