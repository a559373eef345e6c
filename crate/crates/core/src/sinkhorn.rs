//! Sinkhorn operator over logit matrices, Gumbel perturbation, hard
//! assignment at inference, and the masked permutation loss.
//!
//! The operator runs in the log domain: starting from `X / tau`, each
//! iteration applies a log-row normalization followed by a log-column
//! normalization, and the result is exponentiated once at the end. Because
//! the column normalization comes last, column sums of the output are exact
//! to rounding while row sums converge with the iteration count.

use rand::Rng;
use thiserror::Error;

use crate::assign::{hungarian, AssignError, CostMatrix};
use crate::diffcore::{DiffError, Graph, Tensor, Var};

pub const MIN_TAU: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SinkhornError {
    #[error("temperature {0} below {MIN_TAU}")]
    TauTooSmall(f64),
    #[error("iteration count must be at least 1")]
    NoIterations,
    #[error("logit matrix contains a non-finite value")]
    NonFinite,
    #[error("expected a square matrix, got shape {0:?}")]
    NotSquare(Vec<usize>),
    #[error("active length {k} outside 1..={n}")]
    BadLength { k: usize, n: usize },
    #[error("target row {0} is not one-hot")]
    NotOneHot(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Assign(#[from] AssignError),
}

/// Temperature, unroll depth and training-time Gumbel noise scale.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SinkhornConfig {
    pub tau: f64,
    pub iters: usize,
    pub noise_scale: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            tau: 1.0,
            iters: 20,
            noise_scale: 1.0,
        }
    }
}

/// Square matrix of finite logits, `X = g(I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix {
    n: usize,
    values: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, SinkhornError> {
        if n == 0 || values.len() != n * n {
            return Err(SinkhornError::NotSquare(vec![n, values.len() / n.max(1)]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SinkhornError::NonFinite);
        }
        Ok(LogitMatrix { n, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SinkhornError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(SinkhornError::NotSquare(vec![n, 0]));
        }
        LogitMatrix::new(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.values.clone()).expect("square by construction")
    }
}

/// Non-negative matrix whose rows and columns sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DoublyStochasticMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DoublyStochasticMatrix {
    /// Wraps values without checking the marginals; see
    /// [`DoublyStochasticMatrix::max_marginal_error`].
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self, SinkhornError> {
        if n == 0 || values.len() != n * n {
            return Err(SinkhornError::NotSquare(vec![n, values.len() / n.max(1)]));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SinkhornError::NonFinite);
        }
        Ok(DoublyStochasticMatrix { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// `(max |row sum - 1|, max |col sum - 1|)`.
    pub fn max_marginal_error(&self) -> (f64, f64) {
        let dev = |s: Vec<f64>| s.into_iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        (dev(self.row_sums()), dev(self.col_sums()))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.values.clone()).expect("square by construction")
    }
}

/// A 0/1 matrix with exactly one 1 per row and column, stored as the column
/// index chosen by each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationMatrix {
    perm: Vec<usize>,
}

impl PermutationMatrix {
    pub fn new(perm: Vec<usize>) -> Option<Self> {
        let mut seen = vec![false; perm.len()];
        for &j in &perm {
            if j >= perm.len() || std::mem::replace(&mut seen[j], true) {
                return None;
            }
        }
        Some(PermutationMatrix { perm })
    }

    pub fn identity(n: usize) -> Self {
        PermutationMatrix {
            perm: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// Column selected by each row.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn into_perm(self) -> Vec<usize> {
        self.perm
    }

    pub fn dense(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n * n];
        for (i, &j) in self.perm.iter().enumerate() {
            out[i * n + j] = 1.0;
        }
        out
    }
}

fn check_params(tau: f64, iters: usize) -> Result<(), SinkhornError> {
    if !(tau >= MIN_TAU) {
        return Err(SinkhornError::TauTooSmall(tau));
    }
    if iters == 0 {
        return Err(SinkhornError::NoIterations);
    }
    Ok(())
}

/// Sinkhorn unroll on a graph node whose last two axes are square; leading
/// axes are a batch. Returns the doubly-stochastic output node.
pub fn sinkhorn_graph(g: &mut Graph, x: Var, tau: f64, iters: usize) -> Result<Var, SinkhornError> {
    check_params(tau, iters)?;
    let shape = g.shape(x);
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(SinkhornError::NotSquare(shape.to_vec()));
    }
    let mut s = g.scale(x, 1.0 / tau)?;
    for _ in 0..iters {
        s = g.log_row_normalize(s)?;
        s = g.log_col_normalize(s)?;
    }
    Ok(g.exp(s)?)
}

pub fn sinkhorn_operator(
    x: &LogitMatrix,
    tau: f64,
    iters: usize,
) -> Result<DoublyStochasticMatrix, SinkhornError> {
    let mut g = Graph::new();
    let xv = g.constant(x.to_tensor());
    let p = sinkhorn_graph(&mut g, xv, tau, iters)?;
    DoublyStochasticMatrix::from_values(x.n(), g.value(p).data().to_vec())
}

/// One standard Gumbel draw, `-ln(-ln u)` with `u` uniform on (0, 1).
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, noise_scale: f64) -> Vec<f64> {
    (0..len).map(|_| noise_scale * sample_gumbel(rng)).collect()
}

/// `X + noise_scale * G` with `G` i.i.d. standard Gumbel.
pub fn gumbel_perturb<R: Rng + ?Sized>(
    x: &LogitMatrix,
    noise_scale: f64,
    rng: &mut R,
) -> Result<LogitMatrix, SinkhornError> {
    if noise_scale == 0.0 {
        return Ok(x.clone());
    }
    let noise = gumbel_noise(rng, x.values.len(), noise_scale);
    let values = x.values.iter().zip(noise).map(|(a, b)| a + b).collect();
    LogitMatrix::new(x.n, values)
}

/// Permutation maximizing the total selected mass of `p`, solved as a
/// minimum-cost assignment on `-p`.
pub fn hard_assignment(p: &DoublyStochasticMatrix) -> Result<PermutationMatrix, SinkhornError> {
    hard_assignment_scores(p.n(), p.values())
}

/// Same as [`hard_assignment`] for any square score matrix.
pub fn hard_assignment_scores(n: usize, scores: &[f64]) -> Result<PermutationMatrix, SinkhornError> {
    let costs = CostMatrix::new(n, scores.iter().map(|v| -v).collect())?;
    let a = hungarian(&costs);
    Ok(PermutationMatrix::new(a.perm).expect("hungarian returns a bijection"))
}

/// Mean over the first `k` rows of the squared Euclidean distance between
/// `p` and a one-hot `target` (both `n x n` nodes/tensors). Rows at or beyond
/// `k` are ignored in both.
pub fn masked_perm_loss(
    g: &mut Graph,
    p: Var,
    target: &Tensor,
    k: usize,
) -> Result<Var, SinkhornError> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(SinkhornError::NotSquare(shape));
    }
    let n = shape[0];
    if target.shape() != shape.as_slice() {
        return Err(DiffError::ShapeMismatch {
            op: "masked_perm_loss",
            detail: format!("{:?} vs {:?}", shape, target.shape()),
        }
        .into());
    }
    if k == 0 || k > n {
        return Err(SinkhornError::BadLength { k, n });
    }
    let mut seq = Vec::with_capacity(k);
    for i in 0..k {
        let row = target.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != n {
            return Err(SinkhornError::NotOneHot(i));
        }
        seq.push(row.iter().position(|&v| v == 1.0).unwrap());
    }
    let p3 = g.reshape(p, &[1, n, n])?;
    masked_perm_loss_batch(g, p3, &[seq])
}

/// Batched masked loss over `p` of shape `[b, n, n]`; `targets[b]` lists the
/// action index for each active position, its length is the active length.
/// Returns the mean of the per-item losses.
pub fn masked_perm_loss_batch(
    g: &mut Graph,
    p: Var,
    targets: &[Vec<usize>],
) -> Result<Var, SinkhornError> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 3 || shape[1] != shape[2] || shape[0] != targets.len() {
        return Err(SinkhornError::NotSquare(shape));
    }
    let (b, n) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; b * n * n];
    let mut weights = vec![0.0; b * n * n];
    for (bi, seq) in targets.iter().enumerate() {
        let k = seq.len();
        if k == 0 || k > n {
            return Err(SinkhornError::BadLength { k, n });
        }
        let w = 1.0 / (k as f64 * b as f64);
        for (i, &a) in seq.iter().enumerate() {
            if a >= n {
                return Err(SinkhornError::NotOneHot(i));
            }
            let base = (bi * n + i) * n;
            onehot[base + a] = 1.0;
            weights[base..base + n].iter_mut().for_each(|v| *v = w);
        }
    }
    let t = g.constant(Tensor::new(shape.clone(), onehot)?);
    let d = g.sub(p, t)?;
    let sq = g.square(d)?;
    let wsq = g.mask(sq, &Tensor::new(shape, weights)?)?;
    Ok(g.sum(wsq)?)
}

#[cfg(test)]
fn sinkhorn_exp_domain(x: &LogitMatrix, iters: usize) -> Result<DoublyStochasticMatrix, SinkhornError> {
    let mut g = Graph::new();
    let xv = g.constant(x.to_tensor());
    let mut s = g.exp(xv)?;
    for _ in 0..iters {
        s = g.row_normalize(s)?;
        s = g.col_normalize(s)?;
    }
    DoublyStochasticMatrix::from_values(x.n(), g.value(s).data().to_vec())
}
