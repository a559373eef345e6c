//! Tower stacking: pick distinct blocks and stack them bottom to top.
//!
//! The raster is a colour strip of `max_height x 3` floats, row `h` holding
//! the RGB of the block at height `h` and zeros above the tower, so towers
//! with equal colour sequences render identically regardless of which
//! same-coloured block was used.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvError, TaskInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Colour {
    Blue,
    Yellow,
    Red,
    Green,
    Magenta,
    Cyan,
}

impl Colour {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Colour::Blue => [0.0, 0.0, 1.0],
            Colour::Yellow => [1.0, 1.0, 0.0],
            Colour::Red => [1.0, 0.0, 0.0],
            Colour::Green => [0.0, 1.0, 0.0],
            Colour::Magenta => [1.0, 0.0, 1.0],
            Colour::Cyan => [0.0, 1.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Colour::Blue => "blue",
            Colour::Yellow => "yellow",
            Colour::Red => "red",
            Colour::Green => "green",
            Colour::Magenta => "magenta",
            Colour::Cyan => "cyan",
        }
    }
}

/// Blocks available for stacking; the block id is its index.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSet {
    colours: Vec<Colour>,
}

impl BlockSet {
    /// Two blue, two yellow, two red.
    pub fn standard() -> Self {
        use Colour::*;
        BlockSet {
            colours: vec![Blue, Blue, Yellow, Yellow, Red, Red],
        }
    }

    /// Six distinct colours.
    pub fn unique() -> Self {
        use Colour::*;
        BlockSet {
            colours: vec![Blue, Yellow, Red, Green, Magenta, Cyan],
        }
    }

    pub fn from_colours(colours: Vec<Colour>) -> Self {
        BlockSet { colours }
    }

    pub fn len(&self) -> usize {
        self.colours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colours.is_empty()
    }

    pub fn colour(&self, block: usize) -> Colour {
        self.colours[block]
    }

    pub fn symbols(&self) -> Vec<String> {
        self.colours.iter().map(|c| c.name().to_string()).collect()
    }
}

/// A demonstrated tower: distinct block ids, bottom first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TowerTask {
    pub sequence: Vec<usize>,
}

impl TowerTask {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

/// Every ordered selection of distinct blocks whose length is in `lengths`,
/// sorted lexicographically by block-id sequence.
pub fn enumerate_towers(blocks: &BlockSet, lengths: &[usize]) -> Result<Vec<TowerTask>, EnvError> {
    if lengths.is_empty() {
        return Err(EnvError::Invalid("no tower lengths requested".into()));
    }
    if let Some(&bad) = lengths.iter().find(|&&k| k == 0 || k > blocks.len()) {
        return Err(EnvError::Invalid(format!(
            "tower length {bad} outside 1..={}",
            blocks.len()
        )));
    }
    let mut out = Vec::new();
    let mut used = vec![false; blocks.len()];
    let mut prefix = Vec::new();
    extend(&mut out, &mut prefix, &mut used, lengths);
    out.sort();
    Ok(out)
}

fn extend(out: &mut Vec<TowerTask>, prefix: &mut Vec<usize>, used: &mut [bool], lengths: &[usize]) {
    if lengths.contains(&prefix.len()) {
        out.push(TowerTask {
            sequence: prefix.clone(),
        });
    }
    if prefix.len() >= *lengths.iter().max().unwrap() {
        return;
    }
    for b in 0..used.len() {
        if !used[b] {
            used[b] = true;
            prefix.push(b);
            extend(out, prefix, used, lengths);
            prefix.pop();
            used[b] = false;
        }
    }
}

/// Colour-strip raster, `blocks.len() x 3` values row-major. With
/// `noise = Some((amplitude, seed))` a seeded uniform perturbation of at most
/// `amplitude` (capped at 0.05) is added and the result clamped to `[0, 1]`.
pub fn render_tower(task: &TowerTask, blocks: &BlockSet, noise: Option<(f64, u64)>) -> Vec<f64> {
    let mut raster = vec![0.0; blocks.len() * 3];
    for (h, &b) in task.sequence.iter().enumerate() {
        raster[h * 3..h * 3 + 3].copy_from_slice(&blocks.colour(b).rgb());
    }
    if let Some((amplitude, seed)) = noise {
        let a = amplitude.clamp(0.0, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut raster {
            *v = (*v + rng.gen_range(-a..=a)).clamp(0.0, 1.0);
        }
    }
    raster
}

/// `n` distinct towers drawn uniformly without replacement from the
/// enumeration over `lengths`, in sampled order.
pub fn sample_demos(
    blocks: &BlockSet,
    n: usize,
    lengths: &[usize],
    seed: u64,
) -> Result<Vec<TowerTask>, EnvError> {
    let mut all = enumerate_towers(blocks, lengths)?;
    if n > all.len() {
        return Err(EnvError::Invalid(format!(
            "requested {n} demonstrations but only {} towers exist",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(n);
    Ok(all)
}

pub fn to_instance(task_id: usize, task: &TowerTask, blocks: &BlockSet) -> TaskInstance {
    TaskInstance {
        task_id,
        raster: render_tower(task, blocks, None),
        actions: task.sequence.clone(),
    }
}

/// Fraction of positions whose predicted block has the true block's colour.
pub fn colour_precision(pred: &[usize], truth: &[usize], blocks: &BlockSet) -> Result<f64, EnvError> {
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
        .filter(|(&p, &t)| blocks.colour(p) == blocks.colour(t))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Fraction of predicted sequences that use some action more than once.
pub fn repetition_stats(preds: &[Vec<usize>]) -> Result<f64, EnvError> {
    if preds.is_empty() {
        return Err(EnvError::Invalid("no predictions".into()));
    }
    let repeated = preds.iter().filter(|p| has_repeat(p)).count();
    Ok(repeated as f64 / preds.len() as f64)
}

pub fn has_repeat(seq: &[usize]) -> bool {
    let mut seen = std::collections::HashSet::new();
    !seq.iter().all(|a| seen.insert(*a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn falling_factorial(n: usize, k: usize) -> usize {
        (0..k).map(|i| n - i).product()
    }

    /// Independent generator: filter all base-n words for distinct digits.
    fn brute_force_count(n: usize, lengths: &[usize]) -> usize {
        lengths
            .iter()
            .map(|&k| {
                (0..n.pow(k as u32))
                    .filter(|&code| {
                        let mut digits = Vec::new();
                        let mut c = code;
                        for _ in 0..k {
                            digits.push(c % n);
                            c /= n;
                        }
                        !has_repeat(&digits)
                    })
                    .count()
            })
            .sum()
    }

    #[test]
    fn full_permutations() {
        assert_eq!(enumerate_towers(&BlockSet::unique(), &[6]).unwrap().len(), 720);
    }

    #[test]
    fn variable_heights() {
        let towers = enumerate_towers(&BlockSet::standard(), &[2, 3, 4, 5, 6]).unwrap();
        assert_eq!(towers.len(), 1950);
        assert_eq!(30 + 120 + 360 + 720 + 720, 1950);
    }

    #[test]
    fn counts_match_brute_force() {
        for n in 1..=6 {
            let blocks = BlockSet::from_colours(vec![Colour::Red; n]);
            for k in 1..=n {
                let lengths: Vec<usize> = (k..=n).collect();
                let got = enumerate_towers(&blocks, &lengths).unwrap().len();
                assert_eq!(got, brute_force_count(n, &lengths));
                assert_eq!(got, lengths.iter().map(|&l| falling_factorial(n, l)).sum::<usize>());
            }
        }
    }

    #[test]
    fn two_blocks() {
        let blocks = BlockSet::from_colours(vec![Colour::Red, Colour::Blue]);
        let towers = enumerate_towers(&blocks, &[2]).unwrap();
        assert_eq!(towers, vec![TowerTask { sequence: vec![0, 1] }, TowerTask { sequence: vec![1, 0] }]);
    }

    #[test]
    fn enumeration_errors() {
        assert!(enumerate_towers(&BlockSet::standard(), &[]).is_err());
        assert!(enumerate_towers(&BlockSet::standard(), &[7]).is_err());
    }

    #[test]
    fn enumeration_is_sorted_and_distinct() {
        let towers = enumerate_towers(&BlockSet::standard(), &[2, 3]).unwrap();
        assert!(towers.windows(2).all(|w| w[0] < w[1]));
        assert!(towers.iter().all(|t| !has_repeat(&t.sequence)));
    }

    #[test]
    fn empty_rows_are_zero() {
        let blocks = BlockSet::standard();
        let t = TowerTask { sequence: vec![4, 0, 2] };
        let r = render_tower(&t, &blocks, None);
        assert_eq!(&r[..9], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert!(r[9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn colour_equal_towers_render_identically() {
        let blocks = BlockSet::standard();
        let a = TowerTask { sequence: vec![0, 2, 4] };
        let b = TowerTask { sequence: vec![1, 3, 5] };
        assert_eq!(render_tower(&a, &blocks, None), render_tower(&b, &blocks, None));
        let c = TowerTask { sequence: vec![0, 4, 2] };
        assert_ne!(render_tower(&a, &blocks, None), render_tower(&c, &blocks, None));
    }

    #[test]
    fn rasters_equal_iff_colours_equal() {
        let blocks = BlockSet::standard();
        let towers = enumerate_towers(&blocks, &[3]).unwrap();
        for a in towers.iter().step_by(7) {
            for b in &towers {
                let same_colours = a.sequence.iter().zip(&b.sequence).all(|(&x, &y)| blocks.colour(x) == blocks.colour(y));
                assert_eq!(same_colours, render_tower(a, &blocks, None) == render_tower(b, &blocks, None));
            }
        }
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let blocks = BlockSet::standard();
        let t = TowerTask { sequence: vec![0, 3, 5, 1] };
        let clean = render_tower(&t, &blocks, None);
        let a = render_tower(&t, &blocks, Some((0.05, 3)));
        assert_eq!(a, render_tower(&t, &blocks, Some((0.05, 3))));
        assert_ne!(a, clean);
        assert!(a.iter().zip(&clean).all(|(x, y)| (x - y).abs() <= 0.05 + 1e-15));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sampling() {
        let blocks = BlockSet::standard();
        let demos = sample_demos(&blocks, 300, &[6], 1).unwrap();
        assert_eq!(demos.len(), 300);
        let distinct: std::collections::HashSet<_> = demos.iter().collect();
        assert_eq!(distinct.len(), 300);
        assert_eq!(demos, sample_demos(&blocks, 300, &[6], 1).unwrap());
        assert_ne!(demos, sample_demos(&blocks, 300, &[6], 2).unwrap());
        assert!(sample_demos(&blocks, 721, &[6], 1).is_err());
        let mut all = sample_demos(&BlockSet::unique(), 720, &[6], 5).unwrap();
        all.sort();
        assert_eq!(all, enumerate_towers(&BlockSet::unique(), &[6]).unwrap());
    }

    #[test]
    fn colour_precision_examples() {
        let blocks = BlockSet::standard();
        // red=4,5 blue=0,1
        assert_eq!(colour_precision(&[4, 0, 5], &[4, 0, 5], &blocks).unwrap(), 1.0);
        assert!((colour_precision(&[4, 0, 5], &[4, 5, 0], &blocks).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(colour_precision(&[5, 0, 4], &[4, 0, 5], &blocks).unwrap(), 1.0);
        assert!(colour_precision(&[4], &[4, 0], &blocks).is_err());
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(repetition_stats(&[vec![0, 1, 2], vec![2, 1, 0]]).unwrap(), 0.0);
        assert_eq!(repetition_stats(&[vec![1, 1, 2]]).unwrap(), 1.0);
        assert!(repetition_stats(&[]).is_err());
    }
}
