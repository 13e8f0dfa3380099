use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{LilacError, Result};

pub const COLORS: [&str; 6] = ["blue", "green", "grey", "purple", "red", "yellow"];
pub const OBJECTS: [&str; 3] = ["ball", "box", "key"];
pub const BOWL_COLORS: [&str; 6] = ["brown", "cyan", "orange", "petrol", "pink", "white"];
pub const SIZES: [&str; 2] = ["big", "small"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Down,
    Left,
    Right,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Down, Direction::Left, Direction::Right, Direction::Up];

    /// Row and column offset of a one-cell move.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
            Direction::Up => (-1, 0),
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Direction::Down => "down",
            Direction::Left => "to the left",
            Direction::Right => "to the right",
            Direction::Up => "up",
        }
    }

    pub fn from_delta(dr: i32, dc: i32) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.delta() == (dr, dc))
    }
}

/// "move the <color> <object> <direction>"
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction2D {
    pub color: u8,
    pub object: u8,
    pub direction: Direction,
}

/// "put the <size> <color> block in the <color> bowl"
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction3D {
    pub size: u8,
    pub block_color: u8,
    pub bowl_color: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Grid(Instruction2D),
    Table(Instruction3D),
}

impl Instruction {
    pub fn dataset(&self) -> Dataset {
        match self {
            Instruction::Grid(_) => Dataset::TwoD,
            Instruction::Table(_) => Dataset::ThreeD,
        }
    }

    /// Position in the canonical enumeration.
    pub fn id(&self) -> u16 {
        match *self {
            Instruction::Grid(i) => (i.color as u16 * 3 + i.object as u16) * 4 + i.direction as u16,
            Instruction::Table(i) => (i.size as u16 * 6 + i.block_color as u16) * 6 + i.bowl_color as u16,
        }
    }

    pub fn text(&self) -> String {
        match *self {
            Instruction::Grid(i) => format!(
                "move the {} {} {}",
                COLORS[i.color as usize],
                OBJECTS[i.object as usize],
                i.direction.phrase()
            ),
            Instruction::Table(i) => format!(
                "put the {} {} block in the {} bowl",
                SIZES[i.size as usize],
                COLORS[i.block_color as usize],
                BOWL_COLORS[i.bowl_color as usize]
            ),
        }
    }

    pub fn tokens(&self) -> Vec<u16> {
        tokenize(self.dataset(), &self.text()).expect("template words are in the vocabulary")
    }
}

/// All 72 instructions of a dataset, sorted by attribute in alphabetical order.
pub fn enumerate_instructions(dataset: Dataset) -> Vec<Instruction> {
    let mut out = Vec::with_capacity(72);
    match dataset {
        Dataset::TwoD => {
            for color in 0..6 {
                for object in 0..3 {
                    for direction in Direction::ALL {
                        out.push(Instruction::Grid(Instruction2D {
                            color,
                            object,
                            direction,
                        }));
                    }
                }
            }
        }
        Dataset::ThreeD => {
            for size in 0..2 {
                for block_color in 0..6 {
                    for bowl_color in 0..6 {
                        out.push(Instruction::Table(Instruction3D {
                            size,
                            block_color,
                            bowl_color,
                        }));
                    }
                }
            }
        }
    }
    out
}

pub fn instruction_by_id(dataset: Dataset, id: u16) -> Result<Instruction> {
    enumerate_instructions(dataset)
        .get(id as usize)
        .copied()
        .ok_or_else(|| LilacError::Lookup(format!("instruction id {id}")))
}

/// Closed word list of the instruction template. Token ids index this list.
pub fn vocabulary(dataset: Dataset) -> Vec<&'static str> {
    let mut words = Vec::new();
    match dataset {
        Dataset::TwoD => {
            words.extend(["move", "the"]);
            words.extend(COLORS);
            words.extend(OBJECTS);
            words.extend(["down", "up", "to", "left", "right"]);
        }
        Dataset::ThreeD => {
            words.extend(["put", "the"]);
            words.extend(SIZES);
            words.extend(COLORS);
            words.extend(["block", "in"]);
            words.extend(BOWL_COLORS);
            words.push("bowl");
        }
    }
    words
}

/// Longest token sequence the template can produce.
pub fn max_tokens(dataset: Dataset) -> usize {
    match dataset {
        Dataset::TwoD => 7,
        Dataset::ThreeD => 9,
    }
}

pub fn tokenize(dataset: Dataset, text: &str) -> Result<Vec<u16>> {
    let vocab = vocabulary(dataset);
    text.split_whitespace()
        .map(|w| {
            vocab
                .iter()
                .position(|v| *v == w)
                .map(|i| i as u16)
                .ok_or_else(|| LilacError::Lookup(format!("word {w:?} not in the {dataset} vocabulary")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn enumeration_is_canonical() {
        for ds in [Dataset::TwoD, Dataset::ThreeD] {
            let all = enumerate_instructions(ds);
            assert_eq!(all.len(), 72);
            assert_eq!(all.iter().collect::<HashSet<_>>().len(), 72);
            for (i, instr) in all.iter().enumerate() {
                assert_eq!(instr.id() as usize, i);
            }
        }
        assert_eq!(enumerate_instructions(Dataset::TwoD)[0].text(), "move the blue ball down");
    }

    #[test]
    fn vocabulary_sizes_and_closure() {
        assert_eq!(vocabulary(Dataset::TwoD).len(), 16);
        assert_eq!(vocabulary(Dataset::ThreeD).len(), 19);
        for ds in [Dataset::TwoD, Dataset::ThreeD] {
            let mut used = HashSet::new();
            for instr in enumerate_instructions(ds) {
                let toks = instr.tokens();
                assert!(toks.len() <= max_tokens(ds));
                used.extend(toks);
            }
            assert_eq!(used.len(), vocabulary(ds).len(), "every word is used");
        }
        assert!(tokenize(Dataset::TwoD, "move the orange ball").is_err());
    }

    #[test]
    fn colour_sets_disjoint() {
        assert!(COLORS.iter().all(|c| !BOWL_COLORS.contains(c)));
    }
}
