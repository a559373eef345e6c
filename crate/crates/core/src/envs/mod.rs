//! Task environments. Each produces [`TaskInstance`]s: a flat raster, the
//! ground-truth action sequence, and its length.

pub mod scrabble;
pub mod soma;
pub mod tower;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("{0}")]
    Invalid(String),
    #[error("sequence lengths differ (pred {pred}, truth {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("piece {0} is not present")]
    AbsentPiece(usize),
    #[error("no collapse-free extraction order exists")]
    NoSafeOrder,
}

/// One demonstration: what the scene looks like and how it was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: usize,
    pub raster: Vec<f64>,
    pub actions: Vec<usize>,
}

impl TaskInstance {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Errors and totals for true words with a given number of repeated symbols.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionBucket {
    pub positions: usize,
    pub errors: usize,
}

/// Symbol confusion counts: `counts[true][pred]`, with one extra final column
/// for true positions that have no prediction (predicted sequence too short).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub symbols: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Keyed by `len - distinct symbols` of the true sequence.
    pub by_repetition: std::collections::BTreeMap<usize, RepetitionBucket>,
}

impl Confusion {
    pub fn build(
        preds: &[Vec<usize>],
        truths: &[Vec<usize>],
        symbols: Vec<String>,
        symbol_of: impl Fn(usize) -> usize,
    ) -> Self {
        let n = symbols.len();
        let mut counts = vec![vec![0; n + 1]; n];
        let mut by_repetition = std::collections::BTreeMap::new();
        for (pred, truth) in preds.iter().zip(truths) {
            let true_symbols: Vec<usize> = truth.iter().map(|&a| symbol_of(a)).collect();
            let distinct: std::collections::BTreeSet<_> = true_symbols.iter().collect();
            let bucket: &mut RepetitionBucket = by_repetition.entry(truth.len() - distinct.len()).or_default();
            for (i, &t) in true_symbols.iter().enumerate() {
                let p = pred.get(i).map(|&a| symbol_of(a));
                counts[t][p.unwrap_or(n)] += 1;
                bucket.positions += 1;
                bucket.errors += usize::from(p != Some(t));
            }
        }
        Confusion {
            symbols,
            counts,
            by_repetition,
        }
    }
}
