use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddPeriodic(Var, Var),
    Mask(Var, Vec<f64>),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColSum(Var),
    RowNormalize(Var),
    ColNormalize(Var),
    LogRowNormalize(Var),
    LogColNormalize(Var),
    Softmax(Var),
    Reshape(Var),
    RepeatRows(Var, usize),
    ShiftRows { input: Var, shift: usize, period: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddPeriodic(a, b) => vec![a, b],
            Mask(a, _) | Scale(a, _) | RepeatRows(a, _) => vec![a],
            Relu(a) | Exp(a) | Log(a) | Square(a) | Sum(a) | Mean(a) | RowSum(a) | ColSum(a)
            | RowNormalize(a) | ColNormalize(a) | LogRowNormalize(a) | LogColNormalize(a)
            | Softmax(a) | Reshape(a) => vec![a],
            ShiftRows { input, .. } => vec![input],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Some node upstream requires a gradient.
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation.
///
/// Nodes are stored in creation order, which is a topological order, so a
/// backward pass is a single reverse sweep. Leaf gradients accumulate across
/// `backward` calls until [`Graph::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        detail: format!("{a:?} vs {b:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, kind: Op, value: Tensor) -> Result<Var, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op });
        }
        let needs_grad = kind.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op: kind,
            value,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        kind: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, DiffError> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(op, kind, value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", Op::MatMul(a, b), value)
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        kind: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(op, kind, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    /// Adds `y` to `x` with the rows of `y` repeated cyclically: viewing both
    /// as matrices over their last axis, row `r` of the output is
    /// `x[r] + y[r % rows(y)]`. A rank-1 `y` is a bias row.
    pub fn add_periodic(&mut self, x: Var, y: Var) -> Result<Var, DiffError> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        let cx = *sx.last().unwrap_or(&1);
        let cy = *sy.last().unwrap_or(&1);
        let (nx, ny) = (self.value(x).numel(), self.value(y).numel());
        if cx != cy || (nx / cx) % (ny / cy) != 0 {
            return Err(mismatch("add_periodic", sx, sy));
        }
        let (xv, yv) = (self.value(x).data(), self.value(y).data());
        let data = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yv[i % ny])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push("add_periodic", Op::AddPeriodic(x, y), value)
    }

    /// Element-wise product with a constant selection mask (or weight) tensor.
    pub fn mask(&mut self, x: Var, mask: &Tensor) -> Result<Var, DiffError> {
        let sx = self.shape(x);
        if sx != mask.shape() {
            return Err(mismatch("mask", sx, mask.shape()));
        }
        let m = mask.data().to_vec();
        let data = self.value(x).data().iter().zip(&m).map(|(a, b)| a * b).collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push("mask", Op::Mask(x, m), value)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, DiffError> {
        if !s.is_finite() {
            return Err(DiffError::NonFinite { op: "scale" });
        }
        self.unary("scale", x, Op::Scale(x, s), |v| v * s)
    }

    /// Rectified linear unit; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("relu", x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(DiffError::InvalidArgument(
                "log of a non-positive value".into(),
            ));
        }
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Op::Mean(x), Tensor::scalar(s))
    }

    /// Sums over the last axis.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        let value = Tensor::new(shape, data)?;
        self.push("row_sum", Op::RowSum(x), value)
    }

    /// Sums over the second-to-last axis.
    pub fn col_sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        if t.shape().len() < 2 {
            return Err(DiffError::ShapeMismatch {
                op: "col_sum",
                detail: format!("needs rank >= 2, got {:?}", t.shape()),
            });
        }
        let (b, r, c) = t.brc();
        let mut data = vec![0.0; b * c];
        for bi in 0..b {
            for ri in 0..r {
                let row = &t.data()[(bi * r + ri) * c..(bi * r + ri + 1) * c];
                for (o, v) in data[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(shape.len() - 2);
        let value = Tensor::new(shape, data)?;
        self.push("col_sum", Op::ColSum(x), value)
    }

    /// Divides each row (last axis) by its sum. Every row sum must be
    /// strictly positive.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(DiffError::ZeroNormalizer { op: "row_normalize" });
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("row_normalize", Op::RowNormalize(x), value)
    }

    /// Divides each column (second-to-last axis) by its sum. Every column sum
    /// must be strictly positive.
    pub fn col_normalize(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        if t.shape().len() < 2 {
            return Err(DiffError::ShapeMismatch {
                op: "col_normalize",
                detail: format!("needs rank >= 2, got {:?}", t.shape()),
            });
        }
        let (b, r, c) = t.brc();
        let mut data = t.data().to_vec();
        for bi in 0..b {
            let block = &mut data[bi * r * c..(bi + 1) * r * c];
            for ci in 0..c {
                let s: f64 = (0..r).map(|ri| block[ri * c + ci]).sum();
                if !(s > 0.0) {
                    return Err(DiffError::ZeroNormalizer { op: "col_normalize" });
                }
                for ri in 0..r {
                    block[ri * c + ci] /= s;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("col_normalize", Op::ColNormalize(x), value)
    }

    /// Log-domain row normalization: `x - logsumexp(x)` over the last axis.
    pub fn log_row_normalize(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = logsumexp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_row_normalize", Op::LogRowNormalize(x), value)
    }

    /// Log-domain column normalization over the second-to-last axis.
    pub fn log_col_normalize(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        if t.shape().len() < 2 {
            return Err(DiffError::ShapeMismatch {
                op: "log_col_normalize",
                detail: format!("needs rank >= 2, got {:?}", t.shape()),
            });
        }
        let (_, r, c) = t.brc();
        let mut data = t.data().to_vec();
        // row sweeps keep memory access contiguous
        let mut max = vec![0.0; c];
        let mut sum = vec![0.0; c];
        for block in data.chunks_mut(r * c) {
            max.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
            sum.iter_mut().for_each(|s| *s = 0.0);
            for row in block.chunks(c) {
                for (m, &v) in max.iter_mut().zip(row) {
                    *m = m.max(v);
                }
            }
            for row in block.chunks(c) {
                for ((s, &m), &v) in sum.iter_mut().zip(&max).zip(row) {
                    *s += (v - m).exp();
                }
            }
            for (s, &m) in sum.iter_mut().zip(&max) {
                *s = if m == f64::NEG_INFINITY { m } else { m + s.ln() };
            }
            for row in block.chunks_mut(c) {
                for (v, &lse) in row.iter_mut().zip(&sum) {
                    *v -= lse;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_col_normalize", Op::LogColNormalize(x), value)
    }

    /// Log-softmax over the last axis (same operation as
    /// [`Graph::log_row_normalize`]).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        self.log_row_normalize(x)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = logsumexp(row.iter().copied());
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", Op::Softmax(x), value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", Op::Reshape(x), value)
    }

    /// `[b, c] -> [b * times, c]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var, DiffError> {
        let t = self.value(x);
        if t.shape().len() != 2 || times == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "repeat_rows",
                detail: format!("{:?} x {times}", t.shape()),
            });
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(b * times * c);
        for row in t.data().chunks(c) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![b * times, c], data)?;
        self.push("repeat_rows", Op::RepeatRows(x, times), value)
    }

    /// Causal shift along time for a `[b * period, c]` sequence batch:
    /// output row `(b, t)` is input row `(b, t - shift)`, or zeros when
    /// `t < shift`.
    pub fn shift_rows(&mut self, x: Var, shift: usize, period: usize) -> Result<Var, DiffError> {
        let t = self.value(x);
        if t.shape().len() != 2 || period == 0 || t.shape()[0] % period != 0 {
            return Err(DiffError::ShapeMismatch {
                op: "shift_rows",
                detail: format!("{:?} with period {period}", t.shape()),
            });
        }
        let (rows, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; rows * c];
        for r in 0..rows {
            let step = r % period;
            if step >= shift {
                let src = r - shift;
                data[r * c..(r + 1) * c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
            }
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push(
            "shift_rows",
            Op::ShiftRows {
                input: x,
                shift,
                period,
            },
            value,
        )
    }

    /// Reverse sweep from a scalar `loss`, adding d(loss)/d(leaf) into every
    /// `requires_grad` leaf. Returns the number of nodes visited; each node
    /// is visited at most once.
    pub fn backward(&mut self, loss: Var) -> Result<usize, DiffError> {
        if !self.value(loss).is_scalar() {
            return Err(DiffError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut visits = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            visits += 1;
            if self.nodes[i].requires_grad {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g.clone()),
                }
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(visits)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            ga[r * k + kk] += dot(grow, brow);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let a_rk = av[r * k + kk];
                            if a_rk == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += a_rk * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |ga| {
                    for ((o, gv), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * bb;
                    }
                });
                acc(b, &mut |gb| {
                    for ((o, gv), aa) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * aa;
                    }
                });
            }
            Op::AddPeriodic(x, yv) => {
                acc(x, &mut |gx| add_into(gx, g));
                let ny = self.value(yv).numel();
                acc(yv, &mut |gy| {
                    for (idx, gv) in g.iter().enumerate() {
                        gy[idx % ny] += gv;
                    }
                });
            }
            Op::Mask(x, ref m) => acc(x, &mut |gx| {
                for ((o, gv), mv) in gx.iter_mut().zip(g).zip(m) {
                    *o += gv * mv;
                }
            }),
            Op::Scale(x, s) => acc(x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * s)
            }),
            Op::Relu(x) => {
                let xv = self.value(x).data();
                acc(x, &mut |gx| {
                    for ((o, gv), xx) in gx.iter_mut().zip(g).zip(xv) {
                        if *xx > 0.0 {
                            *o += gv;
                        }
                    }
                })
            }
            Op::Exp(x) => acc(x, &mut |gx| {
                for ((o, gv), yy) in gx.iter_mut().zip(g).zip(y) {
                    *o += gv * yy;
                }
            }),
            Op::Log(x) => {
                let xv = self.value(x).data();
                acc(x, &mut |gx| {
                    for ((o, gv), xx) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv / xx;
                    }
                })
            }
            Op::Square(x) => {
                let xv = self.value(x).data();
                acc(x, &mut |gx| {
                    for ((o, gv), xx) in gx.iter_mut().zip(g).zip(xv) {
                        *o += 2.0 * xx * gv;
                    }
                })
            }
            Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / self.value(x).numel() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += scale))
            }
            Op::RowSum(x) => {
                let c = *self.shape(x).last().unwrap_or(&1);
                acc(x, &mut |gx| {
                    for (row, gv) in gx.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|o| *o += gv);
                    }
                })
            }
            Op::ColSum(x) => {
                let (b, r, c) = self.value(x).brc();
                acc(x, &mut |gx| {
                    for bi in 0..b {
                        for ri in 0..r {
                            let row = &mut gx[(bi * r + ri) * c..(bi * r + ri + 1) * c];
                            add_into(row, &g[bi * c..(bi + 1) * c]);
                        }
                    }
                })
            }
            Op::RowNormalize(x) => {
                let xv = self.value(x).data();
                let c = *self.shape(x).last().unwrap_or(&1);
                acc(x, &mut |gx| {
                    for ((go, gr), (yr, xr)) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c).zip(xv.chunks(c)))
                    {
                        let s: f64 = xr.iter().sum();
                        let gy = dot(gr, yr);
                        for (o, gv) in go.iter_mut().zip(gr) {
                            *o += (gv - gy) / s;
                        }
                    }
                })
            }
            Op::ColNormalize(x) => {
                let xv = self.value(x).data();
                let (b, r, c) = self.value(x).brc();
                acc(x, &mut |gx| {
                    for bi in 0..b {
                        let off = bi * r * c;
                        for ci in 0..c {
                            let at = |ri: usize| off + ri * c + ci;
                            let s: f64 = (0..r).map(|ri| xv[at(ri)]).sum();
                            let gy: f64 = (0..r).map(|ri| g[at(ri)] * y[at(ri)]).sum();
                            for ri in 0..r {
                                gx[at(ri)] += (g[at(ri)] - gy) / s;
                            }
                        }
                    }
                })
            }
            Op::LogRowNormalize(x) => {
                let c = *self.shape(x).last().unwrap_or(&1);
                acc(x, &mut |gx| {
                    for ((go, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gs: f64 = gr.iter().sum();
                        for ((o, gv), yy) in go.iter_mut().zip(gr).zip(yr) {
                            *o += gv - yy.exp() * gs;
                        }
                    }
                })
            }
            Op::LogColNormalize(x) => {
                let (_, r, c) = self.value(x).brc();
                acc(x, &mut |gx| {
                    let mut gs = vec![0.0; c];
                    for ((go, gb), yb) in gx.chunks_mut(r * c).zip(g.chunks(r * c)).zip(y.chunks(r * c)) {
                        gs.iter_mut().for_each(|v| *v = 0.0);
                        for row in gb.chunks(c) {
                            gs.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                        for ((orow, grow), yrow) in go.chunks_mut(c).zip(gb.chunks(c)).zip(yb.chunks(c)) {
                            for (((o, gv), yy), s) in orow.iter_mut().zip(grow).zip(yrow).zip(&gs) {
                                *o += gv - yy.exp() * s;
                            }
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let c = *self.shape(x).last().unwrap_or(&1);
                acc(x, &mut |gx| {
                    for ((go, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gy = dot(gr, yr);
                        for ((o, gv), yy) in go.iter_mut().zip(gr).zip(yr) {
                            *o += yy * (gv - gy);
                        }
                    }
                })
            }
            Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, g)),
            Op::RepeatRows(x, times) => {
                let c = self.shape(x)[1];
                acc(x, &mut |gx| {
                    for (ri, grow) in g.chunks(c).enumerate() {
                        let src = ri / times;
                        add_into(&mut gx[src * c..(src + 1) * c], grow);
                    }
                })
            }
            Op::ShiftRows {
                input,
                shift,
                period,
            } => {
                let c = self.shape(input)[1];
                acc(input, &mut |gx| {
                    for (ri, grow) in g.chunks(c).enumerate() {
                        if ri % period >= shift {
                            let src = ri - shift;
                            add_into(&mut gx[src * c..(src + 1) * c], grow);
                        }
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-major `[m, k] x [k, n]` product.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let a_rk = a[r * k + kk];
            if a_rk == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += a_rk * bv;
            }
        }
    }
    out
}
