use std::collections::{HashMap, HashSet};

use lilac_core::data::instruction::{enumerate_instructions, tokenize, vocabulary};
use lilac_core::data::render::render;
use lilac_core::data::scene::{sample_triple, wrong_subproblems};
use lilac_core::data::stream::{partition, task_order};
use lilac_core::data::{build_stream, generate_example, Dataset, StreamConfig, Subproblem};
use lilac_core::rng::SeedTree;
use proptest::prelude::*;

#[test]
fn corrupted_subproblems_are_uniform_in_2d() {
    let instrs = enumerate_instructions(Dataset::TwoD);
    let mut rng = SeedTree::new(42).rng();
    let n = 10_000;
    let mut counts: HashMap<Subproblem, usize> = HashMap::new();
    for i in 0..n {
        let t = sample_triple(&instrs[i % 72], &mut rng).unwrap();
        *counts.entry(t.corrupted).or_default() += 1;
    }
    assert_eq!(counts.len(), 3);
    let expected = n as f64 / 3.0;
    let mut chi2 = 0.0;
    for (&k, &c) in &counts {
        let f = c as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() <= 0.02, "{k:?} frequency {f}");
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    // 99.9% quantile of chi-square with 2 degrees of freedom.
    assert!(chi2 < 13.82, "chi-square {chi2}");
}

#[test]
fn rendering_is_injective_on_random_scenes() {
    for ds in [Dataset::TwoD, Dataset::ThreeD] {
        let instrs = enumerate_instructions(ds);
        let mut rng = SeedTree::new(7).rng();
        let mut scenes = HashSet::new();
        let mut rasters = HashSet::new();
        let mut i = 0;
        while scenes.len() < 1000 {
            let t = sample_triple(&instrs[i % 72], &mut rng).unwrap();
            i += 1;
            if scenes.insert(t.premise.clone()) {
                assert!(rasters.insert(render(&t.premise).data), "raster collision");
            }
        }
    }
}

#[test]
fn task_orders_differ_across_seeds() {
    let orders: HashSet<Vec<Vec<u16>>> = (0..100).map(|s| task_order(Dataset::TwoD, s)).collect();
    assert_eq!(orders.len(), 100);
}

#[test]
fn paper_scale_train_total() {
    let (init, groups) = partition(Dataset::TwoD);
    let per = StreamConfig::paper(Dataset::TwoD).train_per_instruction;
    let total = init.len() * per + groups.iter().map(|g| g.len() * per).sum::<usize>();
    assert_eq!(total, 36_000);
}

#[test]
fn vocabulary_is_closed_under_generation() {
    for ds in [Dataset::TwoD, Dataset::ThreeD] {
        for instr in enumerate_instructions(ds) {
            assert_eq!(tokenize(ds, &instr.text()).unwrap(), instr.tokens());
        }
    }
    assert_eq!(vocabulary(Dataset::TwoD).len(), 16);
}

#[test]
fn stream_splits_are_disjoint_and_sized() {
    let cfg = StreamConfig {
        train_per_instruction: 3,
        val_per_instruction: 2,
        test_per_instruction: 2,
        ..StreamConfig::desk(Dataset::ThreeD)
    };
    let s = build_stream(&cfg, 5).unwrap();
    assert_eq!(s.init.train.len(), 36);
    for t in &s.tasks {
        assert_eq!(t.instructions.len(), 6);
        assert_eq!((t.split.train.len(), t.split.val.len(), t.split.test.len()), (18, 12, 12));
        for e in t.split.train.iter().chain(&t.split.test) {
            assert_eq!(e.task_id, t.task_id);
            assert!(t.instructions.contains(&e.instruction_id));
        }
        for e in &t.split.test {
            assert!(!t.split.train.contains(e));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_examples_corrupt_exactly_one_subproblem(seed in any::<u64>(), idx in 0usize..72, three_d in any::<bool>()) {
        let ds = if three_d { Dataset::ThreeD } else { Dataset::TwoD };
        let instr = enumerate_instructions(ds).swap_remove(idx);
        let g = generate_example(&instr, &mut SeedTree::new(seed).rng()).unwrap();
        prop_assert_ne!(&g.example.positive, &g.example.negative);
        prop_assert!(wrong_subproblems(&instr, &g.scenes.premise, &g.scenes.positive).unwrap().is_empty());
        prop_assert_eq!(wrong_subproblems(&instr, &g.scenes.premise, &g.scenes.negative).unwrap(), vec![g.scenes.corrupted]);
    }

    #[test]
    fn streams_are_pure_functions_of_the_seed(seed in 0u64..1000) {
        let cfg = StreamConfig {
            train_per_instruction: 1,
            val_per_instruction: 1,
            test_per_instruction: 1,
            num_tasks: 2,
            ..StreamConfig::desk(Dataset::TwoD)
        };
        prop_assert_eq!(build_stream(&cfg, seed).unwrap(), build_stream(&cfg, seed).unwrap());
    }
}
