//! Disassembly search with the support simulator in the loop. A removal that
//! causes a collapse is undone and swapped with a random later step; search
//! resumes from the still-valid prefix.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::soma::{remove_part, PuzzleState, SomaSolution};
use crate::envs::EnvError;

pub const DEFAULT_CAP: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("initial order {0:?} is not a permutation of the remaining pieces")]
    BadOrder(Vec<u8>),
    #[error("initializer {name} has {got} orders for {want} solutions")]
    MissingOrders { name: String, got: usize, want: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanResult {
    pub order: Vec<u8>,
    /// Collapse events met before success (or before giving up).
    pub iterations: usize,
    pub succeeded: bool,
}

pub fn backtrack_plan(init_order: &[u8], state: &PuzzleState, seed: u64, cap: usize) -> Result<PlanResult, PlanError> {
    let mut sorted = init_order.to_vec();
    sorted.sort_unstable();
    if sorted != state.piece_ids() {
        return Err(PlanError::BadOrder(init_order.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = init_order.to_vec();
    let mut current = state.clone();
    let mut iterations = 0;
    let mut pos = 0;
    while pos < order.len() {
        let (next, collapsed) = remove_part(&current, order[pos])?;
        if !collapsed {
            current = next;
            pos += 1;
            continue;
        }
        iterations += 1;
        if iterations >= cap {
            return Ok(PlanResult {
                order,
                iterations,
                succeeded: false,
            });
        }
        // the last removal never collapses, so a later step always exists
        let swap_with = rng.gen_range(pos + 1..order.len());
        order.swap(pos, swap_with);
    }
    Ok(PlanResult {
        order,
        iterations,
        succeeded: true,
    })
}

/// Where the planner's first guess comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Initializer {
    /// A fresh uniform shuffle per run.
    Random,
    /// One order per solution, e.g. model predictions or ground-truth labels.
    Fixed { name: String, orders: Vec<Vec<u8>> },
}

impl Initializer {
    pub fn name(&self) -> &str {
        match self {
            Initializer::Random => "random",
            Initializer::Fixed { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub initializer: String,
    pub mean_iters: f64,
    pub std_iters: f64,
    pub initial_collapse_pct: f64,
    pub runs: usize,
    pub failures: usize,
}

/// Every initializer plans every solution once per seed.
pub fn warm_start_comparison(
    initializers: &[Initializer],
    solutions: &[SomaSolution],
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>, PlanError> {
    initializers
        .iter()
        .map(|init| {
            let (iters, failures) = plan_runs(init, solutions, seeds)?;
            Ok(summarize(init.name(), &iters, failures))
        })
        .collect()
}

/// Iteration counts of every (seed, solution) run plus the number of runs
/// that hit the cap.
pub fn plan_runs(init: &Initializer, solutions: &[SomaSolution], seeds: &[u64]) -> Result<(Vec<f64>, usize), PlanError> {
    if let Initializer::Fixed { name, orders } = init {
        if orders.len() != solutions.len() {
            return Err(PlanError::MissingOrders {
                name: name.clone(),
                got: orders.len(),
                want: solutions.len(),
            });
        }
    }
    let mut iters = Vec::new();
    let mut failures = 0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, sol) in solutions.iter().enumerate() {
            let state = sol.state();
            let order = match init {
                Initializer::Random => {
                    let mut o = state.piece_ids();
                    o.shuffle(&mut rng);
                    o
                }
                Initializer::Fixed { orders, .. } => orders[i].clone(),
            };
            let result = backtrack_plan(&order, &state, rng.gen(), DEFAULT_CAP)?;
            failures += usize::from(!result.succeeded);
            iters.push(result.iterations as f64);
        }
    }
    Ok((iters, failures))
}

pub fn summarize(name: &str, iters: &[f64], failures: usize) -> ComparisonRow {
    let (mean, std) = mean_std(iters);
    let initial = iters.iter().filter(|&&v| v > 0.0).count();
    ComparisonRow {
        initializer: name.to_string(),
        mean_iters: mean,
        std_iters: std,
        initial_collapse_pct: 100.0 * initial as f64 / iters.len().max(1) as f64,
        runs: iters.len(),
        failures,
    }
}

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub const COMPARISON_HEADER: &str = "initializer,mean_iters,std_iters,initial_collapse_pct";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.4}\n",
            r.initializer, r.mean_iters, r.std_iters, r.initial_collapse_pct
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::soma::{count_collapses, solve_cube};
    use std::sync::OnceLock;

    fn solutions() -> &'static Vec<SomaSolution> {
        static S: OnceLock<Vec<SomaSolution>> = OnceLock::new();
        S.get_or_init(|| solve_cube().unwrap())
    }

    fn stacked() -> PuzzleState {
        // piece 2 sits on top of piece 1
        PuzzleState::from_parts([(1, vec![[0, 0, 0], [0, 0, 1]]), (2, vec![[0, 0, 2], [1, 0, 2]])])
    }

    #[test]
    fn valid_order_untouched() {
        let r = backtrack_plan(&[2, 1], &stacked(), 0, DEFAULT_CAP).unwrap();
        assert_eq!(r, PlanResult { order: vec![2, 1], iterations: 0, succeeded: true });
        let s = &solutions()[0];
        let r = backtrack_plan(&s.label_order, &s.state(), 3, DEFAULT_CAP).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.order, s.label_order);
    }

    #[test]
    fn single_forced_swap() {
        let r = backtrack_plan(&[1, 2], &stacked(), 0, DEFAULT_CAP).unwrap();
        assert_eq!(r, PlanResult { order: vec![2, 1], iterations: 1, succeeded: true });
    }

    #[test]
    fn rejects_bad_orders() {
        assert!(backtrack_plan(&[1], &stacked(), 0, DEFAULT_CAP).is_err());
        assert!(backtrack_plan(&[1, 1], &stacked(), 0, DEFAULT_CAP).is_err());
        assert!(backtrack_plan(&[1, 3], &stacked(), 0, DEFAULT_CAP).is_err());
    }

    #[test]
    fn cap_reports_failure() {
        let r = backtrack_plan(&[1, 2], &stacked(), 0, 1).unwrap();
        assert!(!r.succeeded);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn deterministic() {
        let s = &solutions()[17];
        let a = backtrack_plan(&[1, 2, 3, 4, 5, 6, 7], &s.state(), 9, DEFAULT_CAP).unwrap();
        assert_eq!(a, backtrack_plan(&[1, 2, 3, 4, 5, 6, 7], &s.state(), 9, DEFAULT_CAP).unwrap());
    }

    /// Re-runs the search while counting every simulated collapse separately.
    fn observed_collapses(init: &[u8], state: &PuzzleState, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = init.to_vec();
        let mut seen = 0;
        let mut pos = 0;
        while pos < order.len() {
            let prefix = &order[..pos];
            let before = count_collapses(state, prefix).unwrap();
            let after = count_collapses(state, &order[..=pos]).unwrap();
            if after > before {
                seen += 1;
                let j = rng.gen_range(pos + 1..order.len());
                order.swap(pos, j);
            } else {
                pos += 1;
            }
        }
        seen
    }

    #[test]
    fn all_solutions_random_starts() {
        let mut total = 0usize;
        let mut runs = 0usize;
        for (i, s) in solutions().iter().enumerate() {
            let state = s.state();
            for seed in 0..100u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + i as u64);
                let mut init = state.piece_ids();
                init.shuffle(&mut rng);
                let plan_seed = rng.gen();
                let r = backtrack_plan(&init, &state, plan_seed, DEFAULT_CAP).unwrap();
                assert!(r.succeeded);
                assert_eq!(count_collapses(&state, &r.order).unwrap(), 0);
                if seed < 3 {
                    assert_eq!(r.iterations, observed_collapses(&init, &state, plan_seed));
                }
                total += r.iterations;
                runs += 1;
            }
        }
        assert!(total as f64 / runs as f64 > 0.0);
    }

    #[test]
    fn comparison_rows() {
        let sols = &solutions()[..40];
        let oracle = Initializer::Fixed {
            name: "oracle".into(),
            orders: sols.iter().map(|s| s.label_order.clone()).collect(),
        };
        let rows = warm_start_comparison(&[Initializer::Random, oracle], sols, &[1, 2, 3]).unwrap();
        assert_eq!(rows[1].mean_iters, 0.0);
        assert_eq!(rows[1].initial_collapse_pct, 0.0);
        assert!(rows[0].mean_iters > rows[1].mean_iters);
        assert_eq!(rows[0].runs, 120);
        let again = warm_start_comparison(&[Initializer::Random], sols, &[1, 2, 3]).unwrap();
        assert_eq!(again[0], rows[0]);
        let csv = comparison_csv(&rows);
        assert!(csv.starts_with(COMPARISON_HEADER));
        assert_eq!(csv.lines().count(), 3);
        let short = Initializer::Fixed { name: "x".into(), orders: vec![] };
        assert!(warm_start_comparison(&[short], sols, &[1]).is_err());
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }
}
