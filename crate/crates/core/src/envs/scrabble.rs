//! Spelling with letter tiles. Duplicate letters are separate tiles, so a
//! word using a letter twice needs two distinct tile ids.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Confusion, EnvError, TaskInstance};

pub const MAX_WORD: usize = 6;
pub const MIN_WORD: usize = 3;
pub const ALPHABET: usize = 26;
pub const RASTER_LEN: usize = MAX_WORD * ALPHABET;

const DISTRIBUTION: [usize; ALPHABET] = [
    9, 2, 2, 4, 12, 2, 3, 2, 9, 1, 1, 4, 2, 6, 8, 2, 1, 6, 4, 6, 4, 2, 2, 1, 2, 1,
];

/// Tiles in id order; tile `i` shows letter `letters[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileSet {
    letters: Vec<char>,
}

impl TileSet {
    pub fn from_letters(letters: Vec<char>) -> Result<Self, EnvError> {
        if let Some(c) = letters.iter().find(|c| !c.is_ascii_uppercase()) {
            return Err(EnvError::Invalid(format!("tile letter {c:?} is not A-Z")));
        }
        Ok(TileSet { letters })
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn letter(&self, tile: usize) -> char {
        self.letters[tile]
    }

    pub fn letter_index(&self, tile: usize) -> usize {
        (self.letters[tile] as u8 - b'A') as usize
    }

    pub fn count(&self, letter: char) -> usize {
        self.letters.iter().filter(|&&c| c == letter).count()
    }

    pub fn symbols(&self) -> Vec<String> {
        self.letters.iter().map(|c| c.to_string()).collect()
    }

    pub fn spell(&self, tiles: &[usize]) -> String {
        tiles.iter().map(|&t| self.letter(t)).collect()
    }
}

/// The 98 lettered tiles of the English set, letter-major ids.
pub fn standard_tileset() -> TileSet {
    let letters = DISTRIBUTION
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat((b'A' + i as u8) as char).take(n))
        .collect();
    TileSet { letters }
}

/// `size` tiles drawn without replacement from the standard set, kept in
/// their standard order and renumbered from 0.
pub fn subset_tileset(size: usize, seed: u64) -> Result<TileSet, EnvError> {
    let full = standard_tileset();
    if size == 0 || size > full.len() {
        return Err(EnvError::Invalid(format!("tile subset size {size} outside 1..={}", full.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, full.len(), size).into_vec();
    picked.sort_unstable();
    Ok(TileSet {
        letters: picked.into_iter().map(|i| full.letters[i]).collect(),
    })
}

/// One-hot letters, one row per word position; rows past the word are zero.
pub fn render_word(tiles: &[usize], tileset: &TileSet) -> Vec<f64> {
    let mut raster = vec![0.0; RASTER_LEN];
    for (pos, &t) in tiles.iter().enumerate() {
        raster[pos * ALPHABET + tileset.letter_index(t)] = 1.0;
    }
    raster
}

fn draw_word(rng: &mut ChaCha8Rng, tileset: &TileSet) -> Vec<usize> {
    let len = rng.gen_range(MIN_WORD..=MAX_WORD);
    sample(rng, tileset.len(), len).into_vec()
}

/// Random tile words of length 3 to 6. Train and test come from separate
/// streams of the same seed, so growing one split never changes the other.
pub fn sample_words(
    tileset: &TileSet,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>), EnvError> {
    if tileset.len() < MAX_WORD {
        return Err(EnvError::Invalid(format!(
            "tile set of {} is smaller than the longest word ({MAX_WORD})",
            tileset.len()
        )));
    }
    let draw = |stream: u64, n: usize, first_id: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n)
            .map(|i| {
                let tiles = draw_word(&mut rng, tileset);
                TaskInstance {
                    task_id: first_id + i,
                    raster: render_word(&tiles, tileset),
                    actions: tiles,
                }
            })
            .collect::<Vec<_>>()
    };
    Ok((draw(1, n_train, 0), draw(2, n_test, n_train)))
}

/// Letter-level agreement: swapping two tiles of the same letter is free.
pub fn spelling_precision(pred: &[usize], truth: &[usize], tileset: &TileSet) -> Result<f64, EnvError> {
    if pred.len() != truth.len() {
        return Err(EnvError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| tileset.letter(p) == tileset.letter(t))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Letter confusion, with errors bucketed by how many letters of the true
/// word repeat an earlier one.
pub fn confusion_matrix(preds: &[Vec<usize>], truths: &[Vec<usize>], tileset: &TileSet) -> Confusion {
    let names: Vec<String> = (0..ALPHABET).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
    Confusion::build(preds, truths, names, |t| tileset.letter_index(t))
}
