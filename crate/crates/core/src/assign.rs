//! Balanced linear assignment: an O(n^3) Hungarian solver and an exhaustive
//! oracle for small matrices.

use thiserror::Error;

pub const MAX_SIDE: usize = 128;
pub const MAX_BRUTE_FORCE_SIDE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("cost matrix side {0} outside 1..={MAX_SIDE}")]
    BadSide(usize),
    #[error("cost matrix is not square ({rows} rows, {len} entries)")]
    NotSquare { rows: usize, len: usize },
    #[error("cost entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("brute force is limited to n <= {MAX_BRUTE_FORCE_SIDE}, got {0}")]
    TooLarge(usize),
}

/// Square matrix of finite assignment costs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self, AssignError> {
        if n == 0 || n > MAX_SIDE {
            return Err(AssignError::BadSide(n));
        }
        if entries.len() != n * n {
            return Err(AssignError::NotSquare {
                rows: n,
                len: entries.len(),
            });
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(AssignError::NonFinite {
                row: i / n,
                col: i % n,
            });
        }
        Ok(CostMatrix { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(AssignError::NotSquare {
                rows: n,
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        CostMatrix::new(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Sum of `C[i][perm[i]]`, accumulated in row order.
    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// A bijection from rows to columns and its total cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `perm[i]` is the column assigned to row `i`.
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost assignment via shortest augmenting paths with row/column
/// potentials (Kuhn-Munkres), O(n^3).
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let n = costs.n();
    let inf = f64::INFINITY;
    // 1-based: index 0 is the virtual column used to start each augmentation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[row_of_col[j] - 1] = j - 1;
    }
    let cost = costs.cost_of(&perm);
    Assignment { perm, cost }
}

/// Exhaustive minimum over all `n!` permutations, visited in lexicographic
/// order; the first (lexicographically smallest) minimizer wins ties.
pub fn brute_force_assignment(costs: &CostMatrix) -> Result<Assignment, AssignError> {
    let n = costs.n();
    if n > MAX_BRUTE_FORCE_SIDE {
        return Err(AssignError::TooLarge(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment {
        cost: costs.cost_of(&perm),
        perm: perm.clone(),
    };
    while next_permutation(&mut perm) {
        let c = costs.cost_of(&perm);
        if c < best.cost {
            best = Assignment {
                perm: perm.clone(),
                cost: c,
            };
        }
    }
    Ok(best)
}

/// Advances `xs` to the next lexicographic permutation; false at the last.
pub fn next_permutation(xs: &mut [usize]) -> bool {
    if xs.len() < 2 {
        return false;
    }
    let mut i = xs.len() - 1;
    while i > 0 && xs[i - 1] >= xs[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = xs.len() - 1;
    while xs[j] <= xs[i - 1] {
        j -= 1;
    }
    xs.swap(i - 1, j);
    xs[i..].reverse();
    true
}
