//! Reverse-mode gradient tape over the small op set the forecaster needs.
//!
//! A [`Tape`] records one forward pass. Values are computed eagerly; each
//! recorded node remembers which op produced it so [`Tape::backward`] can
//! walk the nodes in reverse and push gradients into a [`ParamStore`].
//! A tape may be replayed backward exactly once.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-row list of `(table row, weight)` pairs for [`Tape::weighted_gather`].
pub type GatherRows = Vec<Vec<(usize, f64)>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnStats {
    pub fn new(features: usize) -> Self {
        BnStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    BlockMix {
        support: Var,
        x: Var,
        blocks: usize,
    },
    BlockNT {
        a: Var,
        b: Var,
        blocks: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    WeightedGather {
        table: Var,
        rows: GatherRows,
    },
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Mae {
        pred: Var,
        target: Tensor,
        mask: Vec<bool>,
        count: usize,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tape {
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_finite("constant", &t)?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a parameter read. Repeated reads of the same parameter
    /// share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}^T", ta.shape(), tb.shape()),
            ));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(ta, false, tb, true, &mut out, 0.0);
        self.push("matmul_nt", out, Op::MatMulNT(a, b), &[a, b])
    }

    /// Node-axis aggregation applied block-wise: `x` stacks `blocks`
    /// matrices of `n` rows each, and every block is left-multiplied by its
    /// `n x n` support. `support` is either a single shared `n x n` matrix
    /// or `blocks` stacked ones.
    pub fn block_mix(&mut self, support: Var, x: Var, blocks: usize) -> Result<Var> {
        let (s, xv) = (self.value(support), self.value(x));
        let n = s.cols();
        let d = xv.cols();
        let shared = s.rows() == n;
        if blocks == 0 || xv.rows() != blocks * n || !(shared || s.rows() == blocks * n) {
            return Err(Error::shape(
                "block_mix",
                format!(
                    "support {:?}, x {:?}, blocks {blocks}",
                    s.shape(),
                    xv.shape()
                ),
            ));
        }
        let mut out = Tensor::zeros(blocks * n, d);
        for b in 0..blocks {
            let s_off = if shared { 0 } else { b * n * n };
            gemm_raw(
                n,
                n,
                d,
                &s.data()[s_off..s_off + n * n],
                false,
                n,
                &xv.data()[b * n * d..(b + 1) * n * d],
                false,
                d,
                &mut out.data_mut()[b * n * d..(b + 1) * n * d],
                0.0,
            );
        }
        self.push(
            "block_mix",
            out,
            Op::BlockMix {
                support,
                x,
                blocks,
            },
            &[support, x],
        )
    }

    /// Block-wise `a_b · b_bᵀ`: both inputs stack `blocks` matrices of equal
    /// row count; the output stacks the square products.
    pub fn block_nt(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if blocks == 0 || !av.same_shape(bv) || av.rows() % blocks != 0 {
            return Err(Error::shape(
                "block_nt",
                format!("{:?} vs {:?}, blocks {blocks}", av.shape(), bv.shape()),
            ));
        }
        let n = av.rows() / blocks;
        let d = av.cols();
        let mut out = Tensor::zeros(blocks * n, n);
        for k in 0..blocks {
            let r = k * n * d..(k + 1) * n * d;
            gemm_raw(
                n,
                d,
                n,
                &av.data()[r.clone()],
                false,
                d,
                &bv.data()[r],
                true,
                d,
                &mut out.data_mut()[k * n * n..(k + 1) * n * n],
                0.0,
            );
        }
        self.push("block_nt", out, Op::BlockNT { a, b, blocks }, &[a, b])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for r in 0..xv.rows() {
            for (o, b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, row), &[x, row])
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push("affine", out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Row `r` of the output is `Σ w · table[i]` over `rows[r]`.
    pub fn weighted_gather(&mut self, table: Var, rows: GatherRows) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Tensor::zeros(rows.len(), d);
        for (r, entries) in rows.iter().enumerate() {
            let dst = out.row_mut(r);
            for &(i, w) in entries {
                if i >= tv.rows() {
                    return Err(Error::invalid(format!(
                        "gather index {i} outside table of {} rows",
                        tv.rows()
                    )));
                }
                for (o, &t) in dst.iter_mut().zip(tv.row(i)) {
                    *o += w * t;
                }
            }
        }
        self.push(
            "weighted_gather",
            out,
            Op::WeightedGather { table, rows },
            &[table],
        )
    }

    /// Per-row dot product, producing a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(
                "row_dot",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        self.push("row_dot", Tensor::column(out), Op::RowDot(a, b), &[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Batch normalization over rows (samples) per column (feature).
    ///
    /// Train mode normalizes with the batch statistics and folds them into
    /// `stats`; with a single row it falls back to the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: BnMode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d || stats.mean.len() != d {
            return Err(Error::shape(
                "batch_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let batch_stats = mode == BnMode::Train && n > 1;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; d];
            for r in 0..n {
                for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            for r in 0..n {
                for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                let h = (xv.get(r, c) - mean[c]) * inv_std[c];
                x_hat.set(r, c, h);
                out.set(r, c, gv.data()[c] * h + bv.data()[c]);
            }
        }
        if batch_stats {
            let mom = stats.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            for c in 0..d {
                stats.mean[c] = (1.0 - mom) * stats.mean[c] + mom * mean[c];
                stats.var[c] = (1.0 - mom) * stats.var[c] + mom * var[c] * unbias;
            }
        }
        self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean absolute error over entries where `mask` is true.
    pub fn mae(&mut self, pred: Var, target: Tensor, mask: Vec<bool>) -> Result<Var> {
        let pv = self.value(pred);
        if !pv.same_shape(&target) || mask.len() != target.len() {
            return Err(Error::shape(
                "mae",
                format!("pred {:?}, target {:?}", pv.shape(), target.shape()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("mae over zero valid entries"));
        }
        let sum: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((p, t), _)| (p - t).abs())
            .sum();
        let out = Tensor::scalar(sum / count as f64);
        self.push(
            "mae",
            out,
            Op::Mae {
                pred,
                target,
                mask,
                count,
            },
            &[pred],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Propagates d(loss)/d(node) back through the tape and accumulates
    /// parameter gradients into `store`. `loss` must be `1 x 1`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let mut emit = |v: Var, t: Tensor| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut da = Tensor::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, true, &mut da, 0.0);
                        emit(*a, da);
                    }
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(bv.rows(), bv.cols());
                        gemm(av, true, &g, false, &mut db, 0.0);
                        emit(*b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut da = Tensor::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, false, &mut da, 0.0);
                        emit(*a, da);
                    }
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(bv.rows(), bv.cols());
                        gemm(&g, true, av, false, &mut db, 0.0);
                        emit(*b, db);
                    }
                }
                Op::BlockMix { support, x, blocks } => {
                    let (s, xv) = (self.value(*support), self.value(*x));
                    let n = s.cols();
                    let d = xv.cols();
                    let shared = s.rows() == n;
                    if self.rg(*support) {
                        let mut ds = Tensor::zeros(s.rows(), n);
                        for b in 0..*blocks {
                            let s_off = if shared { 0 } else { b * n * n };
                            gemm_raw(
                                n,
                                d,
                                n,
                                &g.data()[b * n * d..(b + 1) * n * d],
                                false,
                                d,
                                &xv.data()[b * n * d..(b + 1) * n * d],
                                true,
                                d,
                                &mut ds.data_mut()[s_off..s_off + n * n],
                                1.0,
                            );
                        }
                        emit(*support, ds);
                    }
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(xv.rows(), d);
                        for b in 0..*blocks {
                            let s_off = if shared { 0 } else { b * n * n };
                            gemm_raw(
                                n,
                                n,
                                d,
                                &s.data()[s_off..s_off + n * n],
                                true,
                                n,
                                &g.data()[b * n * d..(b + 1) * n * d],
                                false,
                                d,
                                &mut dx.data_mut()[b * n * d..(b + 1) * n * d],
                                0.0,
                            );
                        }
                        emit(*x, dx);
                    }
                }
                Op::BlockNT { a, b, blocks } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = av.rows() / blocks;
                    let d = av.cols();
                    if self.rg(*a) {
                        let mut da = Tensor::zeros(av.rows(), d);
                        for k in 0..*blocks {
                            gemm_raw(
                                n,
                                n,
                                d,
                                &g.data()[k * n * n..(k + 1) * n * n],
                                false,
                                n,
                                &bv.data()[k * n * d..(k + 1) * n * d],
                                false,
                                d,
                                &mut da.data_mut()[k * n * d..(k + 1) * n * d],
                                0.0,
                            );
                        }
                        emit(*a, da);
                    }
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(bv.rows(), d);
                        for k in 0..*blocks {
                            gemm_raw(
                                n,
                                n,
                                d,
                                &g.data()[k * n * n..(k + 1) * n * n],
                                true,
                                n,
                                &av.data()[k * n * d..(k + 1) * n * d],
                                false,
                                d,
                                &mut db.data_mut()[k * n * d..(k + 1) * n * d],
                                0.0,
                            );
                        }
                        emit(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        emit(*a, g.clone());
                    }
                    if self.rg(*b) {
                        emit(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        emit(*a, g.clone());
                    }
                    if self.rg(*b) {
                        emit(*b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        emit(*a, hadamard(&g, bv));
                    }
                    if self.rg(*b) {
                        emit(*b, hadamard(&g, av));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        let c = g.cols();
                        let mut dr = vec![0.0; c];
                        for r in 0..g.rows() {
                            for (s, &v) in dr.iter_mut().zip(g.row(r)) {
                                *s += v;
                            }
                        }
                        emit(*row, Tensor::row_vector(dr));
                    }
                    if self.rg(*x) {
                        emit(*x, g);
                    }
                }
                Op::Affine(x, s) => emit(*x, g.map(|v| v * s)),
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    emit(*x, zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)));
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    emit(*x, zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    emit(*x, zip_map(&g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }));
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    emit(*x, dx);
                }
                Op::WeightedGather { table, rows } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, entries) in rows.iter().enumerate() {
                        let gr = g.row(r);
                        for &(i, w) in entries {
                            for (o, &gv) in dt.row_mut(i).iter_mut().zip(gr) {
                                *o += w * gv;
                            }
                        }
                    }
                    emit(*table, dt);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let scale_rows = |src: &Tensor| {
                        let mut out = src.clone();
                        for r in 0..out.rows() {
                            let gr = g.data()[r];
                            out.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                        }
                        out
                    };
                    if self.rg(*a) {
                        emit(*a, scale_rows(bv));
                    }
                    if self.rg(*b) {
                        emit(*b, scale_rows(av));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if self.rg(p) {
                            let mut dp = Tensor::zeros(g.rows(), pc);
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pc]);
                            }
                            emit(p, dp);
                        }
                        c0 += pc;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, d) = (g.rows(), g.cols());
                    let gv = self.value(*gamma);
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gx = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            sum_g[c] += g.get(r, c);
                            sum_gx[c] += g.get(r, c) * x_hat.get(r, c);
                        }
                    }
                    if self.rg(*gamma) {
                        emit(*gamma, Tensor::new(gv.shape().to_vec(), sum_gx.clone())?);
                    }
                    if self.rg(*beta) {
                        emit(*beta, Tensor::new(gv.shape().to_vec(), sum_g.clone())?);
                    }
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(n, d);
                        let nf = n as f64;
                        for r in 0..n {
                            for c in 0..d {
                                let k = gv.data()[c] * inv_std[c];
                                let v = if *batch_stats {
                                    k / nf * (nf * g.get(r, c) - sum_g[c] - x_hat.get(r, c) * sum_gx[c])
                                } else {
                                    k * g.get(r, c)
                                };
                                dx.set(r, c, v);
                            }
                        }
                        emit(*x, dx);
                    }
                }
                Op::Mae {
                    pred,
                    target,
                    mask,
                    count,
                } => {
                    let pv = self.value(*pred);
                    let scale = g.data()[0] / *count as f64;
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .zip(mask)
                        .map(|((p, t), &m)| {
                            let r = p - t;
                            if !m || r == 0.0 {
                                0.0
                            } else {
                                scale * r.signum()
                            }
                        })
                        .collect();
                    emit(*pred, Tensor::new(pv.shape().to_vec(), data)?);
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    emit(*x, Tensor::filled(xv.rows(), xv.cols(), g.data()[0]));
                }
            }
        }
        store.mark_grads_ready();
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Softmax of a vector; NaN input is an error.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax"));
    }
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
