//! Symbolic scenes, example sampling and the corruption checker.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instruction::{Direction, Instruction, Instruction2D, Instruction3D};
use crate::error::{LilacError, Result};

pub const GRID: usize = 7;
pub const TABLE_SLOTS: usize = 4;
pub const MAX_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridObject {
    pub color: u8,
    pub object: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene2D {
    pub cells: [Option<GridObject>; GRID * GRID],
}

impl Default for Scene2D {
    fn default() -> Self {
        Self {
            cells: [None; GRID * GRID],
        }
    }
}

impl Scene2D {
    pub fn get(&self, row: usize, col: usize) -> Option<GridObject> {
        self.cells[row * GRID + col]
    }

    pub fn object_count(&self) -> usize {
        self.cells.iter().flatten().count()
    }

    /// Destination cell of a one-step move, if it is on the grid and empty.
    fn free_target(&self, cell: usize, dir: Direction) -> Option<usize> {
        let (dr, dc) = dir.delta();
        let r = (cell / GRID) as i32 + dr;
        let c = (cell % GRID) as i32 + dc;
        if r < 0 || c < 0 || r >= GRID as i32 || c >= GRID as i32 {
            return None;
        }
        let to = r as usize * GRID + c as usize;
        self.cells[to].is_none().then_some(to)
    }

    fn moved(&self, from: usize, to: usize) -> Scene2D {
        let mut s = self.clone();
        s.cells[to] = s.cells[from].take();
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub size: u8,
    pub color: u8,
    pub slot: u8,
    pub jitter: (i8, i8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Bowl {
    pub color: u8,
    pub slot: u8,
    pub jitter: (i8, i8),
}

/// Top-down table layout on a 4x4 grid of placement slots.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Scene3D {
    pub blocks: Vec<Block>,
    pub bowls: Vec<Bowl>,
    /// `(block, bowl)` once a block has been put into a bowl.
    pub placed: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Scene {
    Grid(Scene2D),
    Table(Scene3D),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subproblem {
    Color,
    Object,
    Direction,
    Block,
    Bowl,
}

impl Subproblem {
    pub fn for_instruction(instr: &Instruction) -> &'static [Subproblem] {
        match instr {
            Instruction::Grid(_) => &[Subproblem::Color, Subproblem::Object, Subproblem::Direction],
            Instruction::Table(_) => &[Subproblem::Block, Subproblem::Bowl],
        }
    }
}

/// Premise, correct outcome and corrupted outcome of one example.
#[derive(Clone, Debug)]
pub struct SceneTriple {
    pub premise: Scene,
    pub positive: Scene,
    pub negative: Scene,
    pub corrupted: Subproblem,
}

/// Samples a scene triple, picking the corrupted subproblem uniformly first
/// and then resampling scenes until that corruption is realisable.
pub fn sample_triple(instr: &Instruction, rng: &mut ChaCha8Rng) -> Result<SceneTriple> {
    let kinds = Subproblem::for_instruction(instr);
    let kind = kinds[rng.random_range(0..kinds.len())];
    for _ in 0..MAX_RETRIES {
        let found = match instr {
            Instruction::Grid(i) => try_grid(i, kind, rng),
            Instruction::Table(i) => Some(table(i, kind, rng)),
        };
        if let Some(t) = found {
            return Ok(t);
        }
    }
    Err(LilacError::Generation(format!(
        "no scene for {:?} with {kind:?} corruption after {MAX_RETRIES} attempts",
        instr.text()
    )))
}

fn try_grid(instr: &Instruction2D, kind: Subproblem, rng: &mut ChaCha8Rng) -> Option<SceneTriple> {
    let target = GridObject {
        color: instr.color,
        object: instr.object,
    };
    let mut scene = Scene2D::default();
    let n = rng.random_range(3..=9usize);
    let starts: Vec<usize> = (0..GRID * GRID)
        .filter(|&c| scene.free_target(c, instr.direction).is_some())
        .collect();
    let start = *starts.choose(rng)?;
    scene.cells[start] = Some(target);
    let others: Vec<GridObject> = (0..6u8)
        .flat_map(|color| (0..3u8).map(move |object| GridObject { color, object }))
        .filter(|o| *o != target)
        .collect();
    for _ in 1..n {
        let empty: Vec<usize> = (0..GRID * GRID).filter(|&c| scene.cells[c].is_none()).collect();
        let cell = *empty.choose(rng)?;
        scene.cells[cell] = Some(*others.choose(rng)?);
    }
    let dest = scene.free_target(start, instr.direction)?;
    let positive = scene.moved(start, dest);
    let negative = match kind {
        Subproblem::Color | Subproblem::Object => {
            let movable: Vec<(usize, usize)> = (0..GRID * GRID)
                .filter_map(|c| {
                    let o = scene.cells[c]?;
                    let fits = if kind == Subproblem::Color {
                        o.object == target.object && o.color != target.color
                    } else {
                        o.color == target.color && o.object != target.object
                    };
                    if !fits {
                        return None;
                    }
                    scene.free_target(c, instr.direction).map(|to| (c, to))
                })
                .collect();
            let &(from, to) = movable.choose(rng)?;
            scene.moved(from, to)
        }
        Subproblem::Direction => {
            let wrong: Vec<usize> = Direction::ALL
                .into_iter()
                .filter(|&d| d != instr.direction)
                .filter_map(|d| scene.free_target(start, d))
                .collect();
            scene.moved(start, *wrong.choose(rng)?)
        }
        _ => unreachable!("table corruption for a grid instruction"),
    };
    Some(SceneTriple {
        premise: Scene::Grid(scene),
        positive: Scene::Grid(positive),
        negative: Scene::Grid(negative),
        corrupted: kind,
    })
}

fn table(instr: &Instruction3D, kind: Subproblem, rng: &mut ChaCha8Rng) -> SceneTriple {
    let n_blocks = rng.random_range(5..=8usize);
    let n_bowls = rng.random_range(3..=4usize);
    let mut slots: Vec<u8> = (0..(TABLE_SLOTS * TABLE_SLOTS) as u8).collect();
    let (chosen, _) = slots.partial_shuffle(rng, n_blocks + n_bowls);
    let chosen = chosen.to_vec();
    let mut jitter = || (rng.random_range(-2..=2i8), rng.random_range(-2..=2i8));
    let jit: Vec<(i8, i8)> = (0..chosen.len()).map(|_| jitter()).collect();
    let other_blocks: Vec<(u8, u8)> = (0..2u8)
        .flat_map(|s| (0..6u8).map(move |c| (s, c)))
        .filter(|&p| p != (instr.size, instr.block_color))
        .collect();
    let other_bowls: Vec<u8> = (0..6u8).filter(|&c| c != instr.bowl_color).collect();
    let mut blocks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        let (size, color) = if i == 0 {
            (instr.size, instr.block_color)
        } else {
            *other_blocks.choose(rng).unwrap()
        };
        blocks.push(Block {
            size,
            color,
            slot: chosen[i],
            jitter: jit[i],
        });
    }
    let mut bowls = Vec::with_capacity(n_bowls);
    for j in 0..n_bowls {
        let color = if j == 0 {
            instr.bowl_color
        } else {
            *other_bowls.choose(rng).unwrap()
        };
        bowls.push(Bowl {
            color,
            slot: chosen[n_blocks + j],
            jitter: jit[n_blocks + j],
        });
    }
    // Shuffle listing order so the target is not always first.
    let mut block_order: Vec<usize> = (0..n_blocks).collect();
    block_order.shuffle(rng);
    let mut bowl_order: Vec<usize> = (0..n_bowls).collect();
    bowl_order.shuffle(rng);
    let blocks: Vec<Block> = block_order.iter().map(|&i| blocks[i]).collect();
    let bowls: Vec<Bowl> = bowl_order.iter().map(|&i| bowls[i]).collect();
    let tb = block_order.iter().position(|&i| i == 0).unwrap();
    let tw = bowl_order.iter().position(|&i| i == 0).unwrap();
    let premise = Scene3D {
        blocks,
        bowls,
        placed: None,
    };
    let with = |b: usize, w: usize| Scene3D {
        placed: Some((b, w)),
        ..premise.clone()
    };
    let negative = match kind {
        Subproblem::Block => {
            let wrong: Vec<usize> = (0..n_blocks).filter(|&b| b != tb).collect();
            with(*wrong.choose(rng).unwrap(), tw)
        }
        Subproblem::Bowl => {
            let wrong: Vec<usize> = (0..n_bowls).filter(|&w| w != tw).collect();
            with(tb, *wrong.choose(rng).unwrap())
        }
        _ => unreachable!("grid corruption for a table instruction"),
    };
    SceneTriple {
        positive: Scene::Table(with(tb, tw)),
        negative: Scene::Table(negative),
        premise: Scene::Table(premise),
        corrupted: kind,
    }
}

/// Checks the premise invariants and returns the subproblems that `outcome`
/// gets wrong relative to `instr`. Errors if `outcome` is not a single legal
/// action applied to `premise`.
pub fn wrong_subproblems(instr: &Instruction, premise: &Scene, outcome: &Scene) -> Result<Vec<Subproblem>> {
    let bad = |m: &str| Err(LilacError::Invariant(m.to_string()));
    match (instr, premise, outcome) {
        (Instruction::Grid(i), Scene::Grid(p), Scene::Grid(o)) => {
            let n = p.object_count();
            if !(3..=9).contains(&n) {
                return bad("object count outside [3, 9]");
            }
            let target = GridObject {
                color: i.color,
                object: i.object,
            };
            if p.cells.iter().flatten().filter(|&&c| c == target).count() != 1 {
                return bad("target is not unique in the premise");
            }
            let changed: Vec<usize> = (0..GRID * GRID).filter(|&c| p.cells[c] != o.cells[c]).collect();
            let [a, b] = changed[..] else {
                return bad("outcome is not a single move");
            };
            let (from, to) = match (p.cells[a], o.cells[a], p.cells[b], o.cells[b]) {
                (Some(x), None, None, Some(y)) if x == y => (a, b),
                (None, Some(y), Some(x), None) if x == y => (b, a),
                _ => return bad("outcome is not a single move"),
            };
            let dr = (to / GRID) as i32 - (from / GRID) as i32;
            let dc = (to % GRID) as i32 - (from % GRID) as i32;
            let Some(dir) = Direction::from_delta(dr, dc) else {
                return bad("move is not one cell");
            };
            let moved = p.cells[from].unwrap();
            let mut wrong = Vec::new();
            if moved.color != i.color {
                wrong.push(Subproblem::Color);
            }
            if moved.object != i.object {
                wrong.push(Subproblem::Object);
            }
            if dir != i.direction {
                wrong.push(Subproblem::Direction);
            }
            Ok(wrong)
        }
        (Instruction::Table(i), Scene::Table(p), Scene::Table(o)) => {
            if !(5..=8).contains(&p.blocks.len()) || !(3..=4).contains(&p.bowls.len()) {
                return bad("object counts outside range");
            }
            let mut slots: Vec<u8> = p.blocks.iter().map(|b| b.slot).chain(p.bowls.iter().map(|b| b.slot)).collect();
            slots.sort_unstable();
            slots.dedup();
            if slots.len() != p.blocks.len() + p.bowls.len() {
                return bad("overlapping placements");
            }
            let tb = p.blocks.iter().filter(|b| (b.size, b.color) == (i.size, i.block_color)).count();
            let tw = p.bowls.iter().filter(|b| b.color == i.bowl_color).count();
            if tb != 1 || tw != 1 {
                return bad("target block or bowl is not unique");
            }
            if p.placed.is_some() || o.blocks != p.blocks || o.bowls != p.bowls {
                return bad("outcome changes more than one placement");
            }
            let Some((b, w)) = o.placed else {
                return bad("outcome places nothing");
            };
            let mut wrong = Vec::new();
            if (p.blocks[b].size, p.blocks[b].color) != (i.size, i.block_color) {
                wrong.push(Subproblem::Block);
            }
            if p.bowls[w].color != i.bowl_color {
                wrong.push(Subproblem::Bowl);
            }
            Ok(wrong)
        }
        _ => bad("dataset mismatch"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::instruction::enumerate_instructions;
    use crate::data::Dataset;
    use crate::rng::SeedTree;

    #[test]
    fn triples_satisfy_checker() {
        for ds in [Dataset::TwoD, Dataset::ThreeD] {
            let mut rng = SeedTree::new(1).rng();
            for instr in enumerate_instructions(ds) {
                for _ in 0..5 {
                    let t = sample_triple(&instr, &mut rng).unwrap();
                    assert!(wrong_subproblems(&instr, &t.premise, &t.positive).unwrap().is_empty());
                    assert_eq!(wrong_subproblems(&instr, &t.premise, &t.negative).unwrap(), vec![t.corrupted]);
                }
            }
        }
    }

    #[test]
    fn boundary_targets_are_never_placed_off_grid() {
        let instr = Instruction::Grid(Instruction2D {
            color: 4,
            object: 2,
            direction: Direction::Up,
        });
        let mut rng = SeedTree::new(3).rng();
        for _ in 0..200 {
            let t = sample_triple(&instr, &mut rng).unwrap();
            let Scene::Grid(p) = &t.premise else { unreachable!() };
            let row = (0..GRID * GRID)
                .find(|&c| p.cells[c] == Some(GridObject { color: 4, object: 2 }))
                .unwrap()
                / GRID;
            assert!(row > 0);
        }
    }

    #[test]
    fn colour_corruption_moves_a_differently_coloured_twin() {
        let instr = Instruction::Grid(Instruction2D {
            color: 1,
            object: 2,
            direction: Direction::Down,
        });
        let mut rng = SeedTree::new(11).rng();
        let t = (0..100)
            .map(|_| sample_triple(&instr, &mut rng).unwrap())
            .find(|t| t.corrupted == Subproblem::Color)
            .unwrap();
        let (Scene::Grid(p), Scene::Grid(n)) = (&t.premise, &t.negative) else { unreachable!() };
        let from = (0..GRID * GRID).find(|&c| p.cells[c].is_some() && n.cells[c].is_none()).unwrap();
        let moved = p.cells[from].unwrap();
        assert_eq!(moved.object, 2);
        assert_ne!(moved.color, 1);
    }
}
