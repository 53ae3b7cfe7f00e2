//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough context to
//! run the vector-Jacobian product later. Inputs always precede outputs, so
//! a single reverse sweep visits each node once.

use crate::error::{ensure, Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GateCols {
        x: Var,
        gates: Var,
        row: usize,
        groups: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug)]
struct View {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn of(t: &Tensor, transposed: bool) -> View {
        let (r, c) = (t.rows(), t.cols());
        if transposed {
            View {
                rows: c,
                cols: r,
                rs: 1,
                cs: c as isize,
            }
        } else {
            View {
                rows: r,
                cols: c,
                rs: c as isize,
                cs: 1,
            }
        }
    }

    fn dense(rows: usize, cols: usize) -> View {
        View {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn t(self) -> View {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a·b + beta·c` with `c` dense row-major.
fn gemm(a: &[f64], av: View, b: &[f64], bv: View, c: &mut [f64], beta: f64) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(c.len(), av.rows * bv.cols);
    if av.rows == 0 || bv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: the views describe in-bounds strided access into `a`, `b` and
    // the dense `c`, whose lengths were checked against the same extents.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            bv.cols as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh of the inner term of the tanh-approximated GELU.
fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + 0.044715 * x * x * x)).tanh()
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    /// Drop every node recorded after `mark`. Handles past it become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.grads.get(v.0).and_then(|g| g.as_ref()).map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone())
                .unwrap_or_else(|_| Tensor::scalar(g[0]))
        })
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        ensure!(
            t.shape().len() == 2,
            Shape,
            "expected a matrix, got shape {:?}",
            t.shape()
        );
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.matrix_dims(a)?;
        self.matrix_dims(b)?;
        let av = View::of(self.value(a), ta);
        let bv = View::of(self.value(b), tb);
        ensure!(
            av.cols == bv.rows,
            Shape,
            "matmul inner dimensions differ: {}x{} by {}x{}",
            av.rows,
            av.cols,
            bv.rows,
            bv.cols
        );
        let mut out = vec![0.0; av.rows * bv.cols];
        gemm(
            self.value(a).data(),
            av,
            self.value(b).data(),
            bv,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::matrix(av.rows, bv.cols, out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape() == tb.shape(),
            Shape,
            "add of {:?} and {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let cols = tx.cols();
        ensure!(
            tb.len() == cols,
            Shape,
            "row bias of length {} for {} columns",
            tb.len(),
            cols
        );
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, bias) in row.iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRow(x, b), rg))
    }

    /// `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure!(
            ta.shape() == tb.shape(),
            Shape,
            "mul of {:?} and {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let tanh: Vec<f64> = t.data().iter().map(|&x| gelu_tanh(x)).collect();
        let data = t
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &th)| 0.5 * x * (1.0 + th))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Gelu { x: a, tanh }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Row-wise softmax. `mask[i]` false removes entry `i` (flattened index)
    /// from its row; masked outputs are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if let Some(m) = mask {
            ensure!(
                m.len() == t.len(),
                Shape,
                "softmax mask of length {} for {} entries",
                m.len(),
                t.len()
            );
        }
        let mut out = vec![0.0; t.len()];
        for (r, (row, dst)) in t.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            // NaN inputs propagate so the loss can report them.
            if (0..cols).any(|c| keep(c) && row[c].is_nan()) {
                dst.fill(f64::NAN);
                continue;
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        ensure!(
            self.value(gain).len() == d && self.value(bias).len() == d,
            Shape,
            "layer norm of width {d} with gain {} / bias {}",
            self.value(gain).len(),
            self.value(bias).len()
        );
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; t.len()];
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = Vec::with_capacity(t.rows());
        for ((row, dst), xh) in t
            .data()
            .chunks(d)
            .zip(out.chunks_mut(d))
            .zip(xhat.chunks_mut(d))
        {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                xh[i] = (row[i] - mean) * r;
                dst[i] = xh[i] * g[i] + b[i];
            }
            rstd.push(r);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table)?;
        ensure!(!ids.is_empty(), Shape, "empty id sequence");
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            ensure!(id < v, Shape, "id {id} outside table of {v} rows");
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Copies columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x)?;
        ensure!(
            width > 0 && start + width <= cols,
            Shape,
            "column slice {start}..{} of {cols}",
            start + width
        );
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let value = Tensor::matrix(rows, width, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "nothing to concatenate");
        let rows = self.matrix_dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p)?;
            ensure!(r == rows, Shape, "concat of {r} rows onto {rows}");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Splits the columns of `x` into `groups` equal blocks and scales block
    /// `h` by `gates[row, h]`.
    pub fn gate_cols(&mut self, x: Var, gates: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x)?;
        let (grows, groups) = self.matrix_dims(gates)?;
        ensure!(row < grows, Shape, "gate row {row} of {grows}");
        ensure!(
            cols % groups == 0,
            Shape,
            "{cols} columns do not split into {groups} groups"
        );
        let width = cols / groups;
        let g = self.value(gates).row(row).to_vec();
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for r in 0..rows {
            for (h, &gh) in g.iter().enumerate() {
                for v in &mut out[r * cols + h * width..r * cols + (h + 1) * width] {
                    *v *= gh;
                }
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        let rg = self.rg(x) || self.rg(gates);
        Ok(self.push(
            value,
            Op::GateCols {
                x,
                gates,
                row,
                groups,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows whose target is not
    /// `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (t_len, vocab) = self.matrix_dims(logits)?;
        ensure!(
            targets.len() == t_len,
            Shape,
            "{} targets for {t_len} logit rows",
            targets.len()
        );
        if let Some(&bad) = targets.iter().find(|&&id| id >= vocab) {
            return Err(Error::Shape(format!("target id {bad} >= vocab {vocab}")));
        }
        let count = targets.iter().filter(|&&id| id != pad_id).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let t = self.value(logits);
        let mut probs = vec![0.0; t.len()];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target == pad_id {
                continue;
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[target];
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).is_scalar(),
            Contract,
            "backward needs a scalar, got shape {:?}",
            self.value(loss).shape()
        );
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let len = |v: Var| nodes[v.0].value.len();
        let rg = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let av = View::of(va, ta);
                let bv = View::of(vb, tb);
                let gv = View::dense(av.rows, bv.cols);
                if rg(a) {
                    add_into(&mut grads[a.0], va.len(), |ga| {
                        if ta {
                            gemm(vb.data(), bv, gy, gv.t(), ga, 1.0);
                        } else {
                            gemm(gy, gv, vb.data(), bv.t(), ga, 1.0);
                        }
                    });
                }
                if rg(b) {
                    add_into(&mut grads[b.0], vb.len(), |gb| {
                        if tb {
                            gemm(gy, gv.t(), va.data(), av, gb, 1.0);
                        } else {
                            gemm(va.data(), av.t(), gy, gv, gb, 1.0);
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(v) {
                        add_into(&mut grads[v.0], len(v), |g| {
                            g.iter_mut().zip(gy).for_each(|(g, d)| *g += d)
                        });
                    }
                }
            }
            &Op::AddRow(x, b) => {
                if rg(x) {
                    add_into(&mut grads[x.0], len(x), |g| {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d)
                    });
                }
                if rg(b) {
                    let cols = len(b);
                    add_into(&mut grads[b.0], cols, |g| {
                        for row in gy.chunks(cols) {
                            g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                    });
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if rg(a) {
                    add_into(&mut grads[a.0], va.len(), |g| {
                        for k in 0..g.len() {
                            g[k] += gy[k] * vb[k];
                        }
                    });
                }
                if rg(b) {
                    add_into(&mut grads[b.0], vb.len(), |g| {
                        for k in 0..g.len() {
                            g[k] += gy[k] * va[k];
                        }
                    });
                }
            }
            &Op::Scale(a, f) => {
                add_into(&mut grads[a.0], len(a), |g| {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += f * d)
                });
            }
            Op::Gelu { x: a, tanh } => {
                let x = nodes[a.0].value.data();
                add_into(&mut grads[a.0], x.len(), |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * gelu_grad(x[k], tanh[k]);
                    }
                });
            }
            &Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                add_into(&mut grads[a.0], x.len(), |g| {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            g[k] += gy[k];
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let y = &nodes[i].value;
                let cols = y.cols();
                add_into(&mut grads[x.0], y.len(), |g| {
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(cols)
                        .zip(gy.chunks(cols))
                        .zip(g.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let g = nodes[gain.0].value.data();
                if rg(*gain) {
                    add_into(&mut grads[gain.0], d, |gg| {
                        for (dy, xh) in gy.chunks(d).zip(xhat.chunks(d)) {
                            for k in 0..d {
                                gg[k] += dy[k] * xh[k];
                            }
                        }
                    });
                }
                if rg(*bias) {
                    add_into(&mut grads[bias.0], d, |gb| {
                        for dy in gy.chunks(d) {
                            gb.iter_mut().zip(dy).for_each(|(g, v)| *g += v);
                        }
                    });
                }
                if rg(*x) {
                    add_into(&mut grads[x.0], gy.len(), |gx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, ((dy, xh), dx)) in gy
                            .chunks(d)
                            .zip(xhat.chunks(d))
                            .zip(gx.chunks_mut(d))
                            .enumerate()
                        {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for k in 0..d {
                                dxhat[k] = dy[k] * g[k];
                                m1 += dxhat[k];
                                m2 += dxhat[k] * xh[k];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for k in 0..d {
                                dx[k] += rstd[r] * (dxhat[k] - m1 - xh[k] * m2);
                            }
                        }
                    });
                }
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].value.cols();
                add_into(&mut grads[table.0], len(*table), |g| {
                    for (row, &id) in gy.chunks(d).zip(ids) {
                        g[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(g, v)| *g += v);
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let cols = nodes[x.0].value.cols();
                let width = nodes[i].value.cols();
                add_into(&mut grads[x.0], len(x), |g| {
                    for (r, row) in gy.chunks(width).enumerate() {
                        g[r * cols + start..r * cols + start + width]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(g, v)| *g += v);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = nodes[p.0].value.cols();
                    if rg(p) {
                        add_into(&mut grads[p.0], len(p), |g| {
                            for (r, row) in g.chunks_mut(width).enumerate() {
                                row.iter_mut()
                                    .zip(&gy[r * total + offset..r * total + offset + width])
                                    .for_each(|(g, v)| *g += v);
                            }
                        });
                    }
                    offset += width;
                }
            }
            &Op::GateCols {
                x,
                gates,
                row,
                groups,
            } => {
                let xv = &nodes[x.0].value;
                let cols = xv.cols();
                let width = cols / groups;
                let gv = nodes[gates.0].value.row(row);
                if rg(x) {
                    add_into(&mut grads[x.0], xv.len(), |g| {
                        for (k, (g, d)) in g.iter_mut().zip(gy).enumerate() {
                            *g += d * gv[(k % cols) / width];
                        }
                    });
                }
                if rg(gates) {
                    add_into(&mut grads[gates.0], len(gates), |g| {
                        for (k, (x, d)) in xv.data().iter().zip(gy).enumerate() {
                            g[row * groups + (k % cols) / width] += x * d;
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                count,
            } => {
                let vocab = nodes[logits.0].value.cols();
                let scale = gy[0] / *count as f64;
                add_into(&mut grads[logits.0], probs.len(), |g| {
                    for (r, &target) in targets.iter().enumerate() {
                        if target == *pad_id {
                            continue;
                        }
                        let row = &mut g[r * vocab..(r + 1) * vocab];
                        for (gv, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *gv += scale * p;
                        }
                        row[target] -= scale;
                    }
                });
            }
            &Op::Sum(x) => {
                add_into(&mut grads[x.0], len(x), |g| {
                    g.iter_mut().for_each(|g| *g += gy[0])
                });
            }
        }
    }
}
