//! Task streams: a fixed instruction partition, a seed-dependent task order
//! and per-instruction train/val/test samples.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::instruction::{enumerate_instructions, Instruction};
use super::{generate_example, Dataset, Example};
use crate::error::{config, Result};
use crate::rng::SeedTree;

pub const NUM_TASKS: usize = 10;
pub const INSTRUCTIONS_PER_TASK: usize = 6;
pub const INIT_INSTRUCTIONS: usize = 12;
/// Seed of the fixed instruction partition, shared by every stream.
const PARTITION_SEED: u64 = 0x11AC;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub dataset: Dataset,
    pub train_per_instruction: usize,
    pub val_per_instruction: usize,
    pub test_per_instruction: usize,
    /// Number of stream tasks actually used (at most 10).
    #[serde(default = "default_tasks")]
    pub num_tasks: usize,
}

fn default_tasks() -> usize {
    NUM_TASKS
}

impl StreamConfig {
    pub fn desk(dataset: Dataset) -> Self {
        Self {
            dataset,
            train_per_instruction: 60,
            val_per_instruction: 20,
            test_per_instruction: 20,
            num_tasks: NUM_TASKS,
        }
    }

    pub fn paper(dataset: Dataset) -> Self {
        Self {
            dataset,
            train_per_instruction: 500,
            val_per_instruction: 100,
            test_per_instruction: 100,
            num_tasks: NUM_TASKS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_per_instruction == 0 || self.val_per_instruction == 0 || self.test_per_instruction == 0 {
            return config("per-instruction counts must be positive");
        }
        if self.num_tasks == 0 || self.num_tasks > NUM_TASKS {
            return config(format!("num_tasks must be in 1..={NUM_TASKS}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskData {
    /// 1-based position in the stream.
    pub task_id: u16,
    pub instructions: Vec<u16>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskStream {
    pub dataset: Dataset,
    pub init_instructions: Vec<u16>,
    pub init: Split,
    pub tasks: Vec<TaskData>,
    /// Instruction id to task id (0 = initialisation split).
    pub assignment: BTreeMap<u16, u16>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, task_id: u16) -> &TaskData {
        &self.tasks[task_id as usize - 1]
    }

    pub fn total_train(&self) -> usize {
        self.init.train.len() + self.tasks.iter().map(|t| t.split.train.len()).sum::<usize>()
    }
}

fn covers_all_attributes(instrs: &[Instruction]) -> bool {
    let mut seen: [BTreeSet<u8>; 3] = Default::default();
    for i in instrs {
        match *i {
            Instruction::Grid(g) => {
                seen[0].insert(g.color);
                seen[1].insert(g.object);
                seen[2].insert(g.direction as u8);
            }
            Instruction::Table(t) => {
                seen[0].insert(t.size);
                seen[1].insert(t.block_color);
                seen[2].insert(t.bowl_color);
            }
        }
    }
    match instrs.first() {
        Some(Instruction::Grid(_)) => seen[0].len() == 6 && seen[1].len() == 3 && seen[2].len() == 4,
        Some(Instruction::Table(_)) => seen[0].len() == 2 && seen[1].len() == 6 && seen[2].len() == 6,
        None => false,
    }
}

/// The fixed split of the 72 instructions into 12 initialisation
/// instructions and 10 groups of 6. The initialisation set is redrawn until
/// it contains every attribute value, so the frozen encoders see all words
/// and colours.
pub fn partition(dataset: Dataset) -> (Vec<u16>, Vec<Vec<u16>>) {
    let all = enumerate_instructions(dataset);
    let root = SeedTree::new(PARTITION_SEED).child(&dataset.to_string());
    for attempt in 0.. {
        let mut order = all.clone();
        order.shuffle(&mut root.index(attempt).rng());
        if covers_all_attributes(&order[..INIT_INSTRUCTIONS]) {
            let ids: Vec<u16> = order.iter().map(Instruction::id).collect();
            let mut init = ids[..INIT_INSTRUCTIONS].to_vec();
            init.sort_unstable();
            let groups = ids[INIT_INSTRUCTIONS..]
                .chunks(INSTRUCTIONS_PER_TASK)
                .map(|c| {
                    let mut g = c.to_vec();
                    g.sort_unstable();
                    g
                })
                .collect();
            return (init, groups);
        }
    }
    unreachable!()
}

fn generate_split(
    dataset: Dataset,
    instructions: &[u16],
    cfg: &StreamConfig,
    root: SeedTree,
    task_id: u16,
) -> Result<Split> {
    let all = enumerate_instructions(dataset);
    let mut split = Split::default();
    for &id in instructions {
        let instr = all[id as usize];
        let base = root.index(id as u64);
        for (name, count, out) in [
            ("train", cfg.train_per_instruction, &mut split.train),
            ("val", cfg.val_per_instruction, &mut split.val),
            ("test", cfg.test_per_instruction, &mut split.test),
        ] {
            let site = base.child(name);
            for k in 0..count {
                let mut ex = generate_example(&instr, &mut site.index(k as u64).rng())?.example;
                ex.task_id = task_id;
                out.push(ex);
            }
        }
    }
    Ok(split)
}

/// Builds the full stream. Every example is drawn from its own substream
/// keyed by (seed, instruction, split, index).
pub fn build_stream(cfg: &StreamConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    let (init_ids, mut groups) = partition(cfg.dataset);
    let root = SeedTree::new(seed);
    groups.shuffle(&mut root.child("task-order").rng());
    groups.truncate(cfg.num_tasks);
    let data_root = root.child("examples");
    let mut assignment = BTreeMap::new();
    for &id in &init_ids {
        assignment.insert(id, 0);
    }
    let init = generate_split(cfg.dataset, &init_ids, cfg, data_root, 0)?;
    let mut tasks = Vec::with_capacity(groups.len());
    for (pos, group) in groups.into_iter().enumerate() {
        let task_id = pos as u16 + 1;
        for &id in &group {
            assignment.insert(id, task_id);
        }
        let split = generate_split(cfg.dataset, &group, cfg, data_root, task_id)?;
        tasks.push(TaskData {
            task_id,
            instructions: group,
            split,
        });
    }
    Ok(TaskStream {
        dataset: cfg.dataset,
        init_instructions: init_ids,
        init,
        tasks,
        assignment,
    })
}

/// Task order as a list of instruction groups, without generating examples.
pub fn task_order(dataset: Dataset, seed: u64) -> Vec<Vec<u16>> {
    let (_, mut groups) = partition(dataset);
    groups.shuffle(&mut SeedTree::new(seed).child("task-order").rng());
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        for ds in [Dataset::TwoD, Dataset::ThreeD] {
            let (init, groups) = partition(ds);
            assert_eq!(init.len(), INIT_INSTRUCTIONS);
            assert_eq!(groups.len(), NUM_TASKS);
            let mut all: Vec<u16> = init.clone();
            for g in &groups {
                assert_eq!(g.len(), INSTRUCTIONS_PER_TASK);
                all.extend(g);
            }
            all.sort_unstable();
            assert_eq!(all, (0..72).collect::<Vec<u16>>());
            assert_eq!(partition(ds), (init, groups));
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        let mut cfg = StreamConfig::desk(Dataset::TwoD);
        cfg.val_per_instruction = 0;
        assert!(build_stream(&cfg, 0).is_err());
    }

    #[test]
    fn small_stream_is_deterministic() {
        let cfg = StreamConfig {
            dataset: Dataset::TwoD,
            train_per_instruction: 2,
            val_per_instruction: 1,
            test_per_instruction: 1,
            num_tasks: 3,
        };
        let a = build_stream(&cfg, 5).unwrap();
        assert_eq!(a, build_stream(&cfg, 5).unwrap());
        assert_eq!(a.tasks.len(), 3);
        assert_eq!(a.init.train.len(), 24);
        assert!(a.tasks.iter().all(|t| t.split.train.iter().all(|e| e.task_id == t.task_id)));
    }
}
