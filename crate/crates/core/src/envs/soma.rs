//! Soma cube: seven polycubes tiling a 3x3x3 cube.
//!
//! Cells are indexed `z * 9 + y * 3 + x`, so the ground layer comes first.
//! Gravity points along -z and the cube rests on `z = 0`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use super::{EnvError, TaskInstance};

pub const CELLS: usize = 27;
pub const PIECES: usize = 7;
pub const RASTER_LEN: usize = 4 * 3 * 3 * 3;

/// Piece ids 5 and 6 are the two screws, mirror images of each other.
const MIRROR_PAIR: (u8, u8) = (5, 6);

pub type Cell = [i32; 3];
pub type Labels = [u8; CELLS];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub id: u8,
    pub name: &'static str,
    pub cells: Vec<Cell>,
}

/// The seven standard pieces: one tricube and six tetracubes.
pub fn pieces() -> Vec<Piece> {
    let p = |id, name, cells: &[Cell]| Piece {
        id,
        name,
        cells: cells.to_vec(),
    };
    vec![
        p(1, "v", &[[0, 0, 0], [1, 0, 0], [0, 1, 0]]),
        p(2, "l", &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]]),
        p(3, "t", &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1, 0]]),
        p(4, "z", &[[0, 0, 0], [1, 0, 0], [1, 1, 0], [2, 1, 0]]),
        p(5, "a", &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 1]]),
        p(6, "b", &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 1]]),
        p(7, "p", &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]),
    ]
}

/// A signed axis permutation: `out[i] = sign[i] * v[axis[i]]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Symmetry {
    axis: [usize; 3],
    sign: [i32; 3],
}

impl Symmetry {
    pub fn apply(&self, v: Cell) -> Cell {
        [
            self.sign[0] * v[self.axis[0]],
            self.sign[1] * v[self.axis[1]],
            self.sign[2] * v[self.axis[2]],
        ]
    }

    pub fn is_proper(&self) -> bool {
        let swaps = (0..3)
            .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
            .filter(|&(i, j)| self.axis[i] > self.axis[j])
            .count();
        let parity = if swaps % 2 == 0 { 1 } else { -1 };
        parity * self.sign.iter().product::<i32>() == 1
    }

    /// Acts on cube cells about the cube centre.
    fn apply_cell(&self, c: usize) -> usize {
        let [x, y, z] = cell_coords(c);
        let r = self.apply([x - 1, y - 1, z - 1]);
        cell_index([r[0] + 1, r[1] + 1, r[2] + 1])
    }
}

/// All 48 symmetries of the cube; the first 24 are the rotations.
pub fn symmetries() -> Vec<Symmetry> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut all = Vec::with_capacity(48);
    for axis in perms {
        for bits in 0..8 {
            let sign = [0, 1, 2].map(|i| if bits >> i & 1 == 1 { -1 } else { 1 });
            all.push(Symmetry { axis, sign });
        }
    }
    all.sort_by_key(|s| !s.is_proper());
    all
}

pub fn cell_index(c: Cell) -> usize {
    (c[2] * 9 + c[1] * 3 + c[0]) as usize
}

pub fn cell_coords(i: usize) -> Cell {
    let i = i as i32;
    [i % 3, i / 3 % 3, i / 9]
}

fn normalize(mut cells: Vec<Cell>) -> Vec<Cell> {
    for axis in 0..3 {
        let lo = cells.iter().map(|c| c[axis]).min().unwrap_or(0);
        cells.iter_mut().for_each(|c| c[axis] -= lo);
    }
    cells.sort();
    cells
}

/// Distinct rotated shapes of a piece, translated to non-negative offsets.
pub fn enumerate_orientations(cells: &[Cell]) -> Vec<Vec<Cell>> {
    let mut seen = BTreeSet::new();
    for s in symmetries().iter().take(24) {
        seen.insert(normalize(cells.iter().map(|&c| s.apply(c)).collect()));
    }
    seen.into_iter().collect()
}

/// A piece occupying concrete cells of the cube.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub piece_id: u8,
    pub orientation: usize,
    pub translation: Cell,
    pub mask: u32,
}

impl Placement {
    pub fn cells(&self) -> Vec<usize> {
        mask_cells(self.mask)
    }
}

fn mask_cells(mask: u32) -> Vec<usize> {
    (0..CELLS).filter(|&c| mask >> c & 1 == 1).collect()
}

/// Every in-cube placement of every piece, grouped by lowest covered cell.
fn placements_by_anchor() -> Vec<Vec<Placement>> {
    let mut by_anchor = vec![Vec::new(); CELLS];
    for piece in pieces() {
        for (o, shape) in enumerate_orientations(&piece.cells).iter().enumerate() {
            for tz in 0..3 {
                for ty in 0..3 {
                    for tx in 0..3 {
                        let moved: Vec<Cell> = shape.iter().map(|c| [c[0] + tx, c[1] + ty, c[2] + tz]).collect();
                        if moved.iter().any(|c| c.iter().any(|&v| v > 2)) {
                            continue;
                        }
                        let mask = moved.iter().fold(0u32, |m, &c| m | 1 << cell_index(c));
                        by_anchor[mask.trailing_zeros() as usize].push(Placement {
                            piece_id: piece.id,
                            orientation: o,
                            translation: [tx, ty, tz],
                            mask,
                        });
                    }
                }
            }
        }
    }
    by_anchor
}

/// Every tiling of the cube as a cell labelling, in search order: fill the
/// lowest empty cell with each placement covering it.
pub fn solve_raw() -> Vec<Labels> {
    let by_anchor = placements_by_anchor();
    let mut out = Vec::new();
    let mut stack: Vec<&Placement> = Vec::new();
    search(&by_anchor, 0, 0, &mut stack, &mut out);
    out
}

fn search<'a>(
    by_anchor: &'a [Vec<Placement>],
    filled: u32,
    used: u8,
    stack: &mut Vec<&'a Placement>,
    out: &mut Vec<Labels>,
) {
    if filled == (1 << CELLS) - 1 {
        let mut labels = [0u8; CELLS];
        for p in stack.iter() {
            mask_cells(p.mask).into_iter().for_each(|c| labels[c] = p.piece_id);
        }
        out.push(labels);
        return;
    }
    let anchor = (!filled).trailing_zeros() as usize;
    for p in &by_anchor[anchor] {
        if used >> p.piece_id & 1 == 0 && p.mask & filled == 0 {
            stack.push(p);
            search(by_anchor, filled | p.mask, used | 1 << p.piece_id, stack, out);
            stack.pop();
        }
    }
}

/// Relabels the cube under a symmetry. Mirror symmetries turn one screw into
/// the other, so their labels are exchanged.
pub fn transform(labels: &Labels, s: &Symmetry) -> Labels {
    let mut out = [0u8; CELLS];
    for (c, &l) in labels.iter().enumerate() {
        out[s.apply_cell(c)] = if s.is_proper() { l } else { swap_mirror(l) };
    }
    out
}

fn swap_mirror(l: u8) -> u8 {
    match l {
        l if l == MIRROR_PAIR.0 => MIRROR_PAIR.1,
        l if l == MIRROR_PAIR.1 => MIRROR_PAIR.0,
        l => l,
    }
}

/// Lexicographically smallest labelling over all 48 symmetries.
pub fn canonicalize(labels: &Labels) -> Labels {
    symmetries()
        .iter()
        .map(|s| transform(labels, s))
        .min()
        .expect("symmetry group is non-empty")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SomaSolution {
    pub placements: Vec<Placement>,
    pub canonical_form: Labels,
    pub label_order: Vec<u8>,
}

impl SomaSolution {
    pub fn from_labels(labels: &Labels) -> Result<Self, EnvError> {
        let canonical_form = canonicalize(labels);
        let placements = placements_of(&canonical_form)?;
        let label_order = label_extraction_order(&PuzzleState::full(&canonical_form)?)?;
        Ok(SomaSolution {
            placements,
            canonical_form,
            label_order,
        })
    }

    pub fn state(&self) -> PuzzleState {
        PuzzleState {
            parts: self.placements.iter().map(|p| (p.piece_id, p.mask)).collect(),
        }
    }
}

/// Recovers placements (with orientation and offset) from a full labelling.
pub fn placements_of(labels: &Labels) -> Result<Vec<Placement>, EnvError> {
    let mut out = Vec::with_capacity(PIECES);
    for piece in pieces() {
        let cells: Vec<Cell> = (0..CELLS)
            .filter(|&c| labels[c] == piece.id)
            .map(cell_coords)
            .collect();
        if cells.len() != piece.cells.len() {
            return Err(EnvError::Invalid(format!("piece {} covers {} cells", piece.id, cells.len())));
        }
        let translation = [0, 1, 2].map(|a| cells.iter().map(|c| c[a]).min().unwrap());
        let shape = normalize(cells.clone());
        let orientation = enumerate_orientations(&piece.cells)
            .iter()
            .position(|o| *o == shape)
            .ok_or_else(|| EnvError::Invalid(format!("cells of piece {} do not form its shape", piece.id)))?;
        out.push(Placement {
            piece_id: piece.id,
            orientation,
            translation,
            mask: cells.iter().fold(0, |m, &c| m | 1 << cell_index(c)),
        });
    }
    Ok(out)
}

/// The 240 assemblies up to rotation and reflection, sorted by canonical form.
pub fn solve_cube() -> Result<Vec<SomaSolution>, EnvError> {
    let forms: BTreeSet<Labels> = solve_raw().iter().map(canonicalize).collect();
    forms.iter().map(SomaSolution::from_labels).collect()
}

/// Parts still in the cube, by piece id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PuzzleState {
    pub parts: BTreeMap<u8, u32>,
}

impl PuzzleState {
    pub fn full(labels: &Labels) -> Result<Self, EnvError> {
        Ok(PuzzleState {
            parts: placements_of(labels)?.into_iter().map(|p| (p.piece_id, p.mask)).collect(),
        })
    }

    pub fn from_parts(parts: impl IntoIterator<Item = (u8, Vec<Cell>)>) -> Self {
        PuzzleState {
            parts: parts
                .into_iter()
                .map(|(id, cells)| (id, cells.iter().fold(0, |m, &c| m | 1 << cell_index(c))))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn piece_ids(&self) -> Vec<u8> {
        self.parts.keys().copied().collect()
    }

    pub fn all_supported(&self) -> bool {
        supported_set(self).len() == self.parts.len()
    }
}

const GROUND: u32 = 0b111_111_111;

/// Fixed point of: a part is supported if it touches the ground or has a cell
/// directly above a cell of a supported part.
pub fn supported_set(state: &PuzzleState) -> BTreeSet<u8> {
    let mut supported = BTreeSet::new();
    // cells of supported parts, shifted up one layer
    let mut resting_on = GROUND;
    loop {
        let before = supported.len();
        for (&id, &mask) in &state.parts {
            if !supported.contains(&id) && mask & resting_on != 0 {
                supported.insert(id);
                resting_on |= (mask << 9) & ((1 << CELLS) - 1);
            }
        }
        if supported.len() == before {
            return supported;
        }
    }
}

/// Deletes a part; `collapsed` is true when any remaining part loses support.
pub fn remove_part(state: &PuzzleState, piece_id: u8) -> Result<(PuzzleState, bool), EnvError> {
    let mut next = state.clone();
    if next.parts.remove(&piece_id).is_none() {
        return Err(EnvError::AbsentPiece(piece_id as usize));
    }
    let collapsed = !next.all_supported();
    Ok((next, collapsed))
}

/// First collapse-free removal order by depth-first search, trying lower
/// piece ids first.
pub fn label_extraction_order(state: &PuzzleState) -> Result<Vec<u8>, EnvError> {
    let mut order = Vec::new();
    let mut dead = HashSet::new();
    if extract(state, &mut order, &mut dead) {
        Ok(order)
    } else {
        Err(EnvError::NoSafeOrder)
    }
}

fn extract(state: &PuzzleState, order: &mut Vec<u8>, dead: &mut HashSet<u32>) -> bool {
    if state.is_empty() {
        return true;
    }
    let key = state.parts.keys().fold(0u32, |m, &id| m | 1 << id);
    if dead.contains(&key) {
        return false;
    }
    for id in state.piece_ids() {
        let (next, collapsed) = remove_part(state, id).expect("id taken from state");
        if collapsed {
            continue;
        }
        order.push(id);
        if extract(&next, order, dead) {
            return true;
        }
        order.pop();
    }
    dead.insert(key);
    false
}

/// Number of collapses when removing parts in `order` from `state`, without
/// any repair.
pub fn count_collapses(state: &PuzzleState, order: &[u8]) -> Result<usize, EnvError> {
    let mut s = state.clone();
    let mut collapses = 0;
    for &id in order {
        let (next, collapsed) = remove_part(&s, id)?;
        collapses += collapsed as usize;
        s = next;
    }
    Ok(collapses)
}

pub fn piece_rgb(id: u8) -> [f64; 3] {
    match id {
        1 => [1.0, 0.0, 0.0],
        2 => [0.0, 1.0, 0.0],
        3 => [0.0, 0.0, 1.0],
        4 => [1.0, 1.0, 0.0],
        5 => [1.0, 0.0, 1.0],
        6 => [0.0, 1.0, 1.0],
        7 => [1.0, 0.5, 0.0],
        _ => [0.0; 3],
    }
}

/// Views from +x, +y, -x, -y (a camera circling the cube counter-clockwise
/// seen from above). Each view is 3 rows (top first) by 3 columns (left to
/// right as seen by the camera) of RGB, showing the nearest piece.
pub fn render_views(labels: &Labels) -> Vec<f64> {
    let mut raster = Vec::with_capacity(RASTER_LEN);
    // (depth axis, looking from the positive side?) per view
    let views: [(usize, bool); 4] = [(0, true), (1, true), (0, false), (1, false)];
    for (depth_axis, from_positive) in views {
        for row in 0..3 {
            let z = 2 - row;
            for col in 0..3 {
                // right-hand direction for a camera looking at the centre
                let side = match (depth_axis, from_positive) {
                    (0, true) => col,
                    (1, true) => 2 - col,
                    (0, false) => 2 - col,
                    _ => col,
                };
                let depths: Vec<i32> = if from_positive { vec![2, 1, 0] } else { vec![0, 1, 2] };
                let label = depths
                    .into_iter()
                    .map(|d| {
                        let c = if depth_axis == 0 { [d, side, z] } else { [side, d, z] };
                        labels[cell_index(c)]
                    })
                    .find(|&l| l != 0)
                    .unwrap_or(0);
                raster.extend_from_slice(&piece_rgb(label));
            }
        }
    }
    raster
}

/// Demonstration for one solution: its four views and the label order as
/// 0-based actions.
pub fn to_instance(task_id: usize, solution: &SomaSolution) -> TaskInstance {
    TaskInstance {
        task_id,
        raster: render_views(&solution.canonical_form),
        actions: solution.label_order.iter().map(|&id| id as usize - 1).collect(),
    }
}

pub const CACHE_HEADER: &str = "# soma solutions v1: 27 cell labels (index z*9+y*3+x), space, extraction order";

/// One line per solution: 27 label digits, a space, the 7-digit order.
pub fn write_solutions_cache(solutions: &[SomaSolution]) -> String {
    let mut s = String::new();
    writeln!(s, "{CACHE_HEADER}").unwrap();
    for sol in solutions {
        let labels: String = sol.canonical_form.iter().map(|d| char::from(b'0' + d)).collect();
        let order: String = sol.label_order.iter().map(|d| char::from(b'0' + d)).collect();
        writeln!(s, "{labels} {order}").unwrap();
    }
    s
}

pub fn read_solutions_cache(text: &str) -> Result<Vec<SomaSolution>, EnvError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| EnvError::Invalid(format!("solutions cache line {}: {what}", lineno + 1));
        let (labels, order) = line.split_once(' ').ok_or_else(|| bad("missing order"))?;
        let digits = |s: &str| -> Result<Vec<u8>, EnvError> {
            s.bytes()
                .map(|b| match b {
                    b'1'..=b'7' => Ok(b - b'0'),
                    _ => Err(bad("label outside 1..=7")),
                })
                .collect()
        };
        let labels: Labels = digits(labels)?.try_into().map_err(|_| bad("expected 27 labels"))?;
        let order = digits(order)?;
        let state = PuzzleState::full(&labels)?;
        if order.len() != PIECES || count_collapses(&state, &order)? != 0 {
            return Err(bad("extraction order is not a collapse-free permutation"));
        }
        out.push(SomaSolution {
            placements: placements_of(&labels)?,
            canonical_form: labels,
            label_order: order,
        });
    }
    Ok(out)
}
