use std::collections::BTreeSet;

use lilac_autodiff::numcheck::project;
use lilac_autodiff::{Adam, AdamConfig, StoreId, Tape};
use lilac_core::data::instruction::enumerate_instructions;
use lilac_core::data::{generate_example, Dataset, Example, Raster};
use lilac_core::model::*;
use lilac_core::rng::SeedTree;
use lilac_core::specialization::*;
use proptest::prelude::*;

fn model(arch: Arch) -> VlModel<f64> {
    VlModel::new(ModelConfig::tiny(arch, Dataset::TwoD), SeedTree::new(11)).unwrap()
}

fn bank(arch: Arch, strategy: &str) -> ParameterBank<f64> {
    let m = model(arch);
    let s = resolve_strategy(arch, m.config.layers, strategy).unwrap();
    ParameterBank::new(m, s, SeedTree::new(12)).unwrap()
}

fn examples(n: usize) -> Vec<Example> {
    let instrs = enumerate_instructions(Dataset::TwoD);
    let mut rng = SeedTree::new(13).rng();
    (0..n)
        .map(|i| generate_example(&instrs[(i * 7) % 72], &mut rng).unwrap().example)
        .collect()
}

fn premise(b: &ParameterBank<f64>, task: u16, ex: &[Example]) -> Vec<f64> {
    let toks: Vec<&[u16]> = ex.iter().map(|e| e.tokens.as_slice()).collect();
    let prem: Vec<&Raster> = ex.iter().map(|e| &e.premise).collect();
    forward_premise(&b.config, &b.bind(task).unwrap(), &toks, &prem)
        .unwrap()
        .into_data()
}

fn perturb(store: &mut lilac_autodiff::ParamStore<f64>) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.25;
        }
    }
}

#[test]
fn paper_strategy_sets() {
    let t = named_strategies(Arch::Transformer, 4);
    for name in ["first-layer", "last-layer", "all-ffn1", "all-attn", "all-norms", "norm1@2", "norm2@0", "norms@1", "monolithic", "expert"] {
        assert!(t.contains_key(name), "{name}");
    }
    let attn: BTreeSet<String> = t["all-attn"].paths.iter().map(|p| p.to_string()).collect();
    assert_eq!(attn, (0..4).map(|l| format!("transformer:{l}:attn")).collect());
    let f = named_strategies(Arch::Film, 4);
    for name in ["first-layer", "last-layer", "conv-last-layer", "bn-all", "mod-gamma", "mod-beta", "monolithic", "expert"] {
        assert!(f.contains_key(name), "{name}");
    }
    assert!(f["monolithic"].is_monolithic());
    assert!(f["expert"].is_expert(Arch::Film, 4));
    assert!(resolve_strategy(Arch::Transformer, 4, "transformer:4:attn").is_err());
    assert!(resolve_strategy(Arch::Transformer, 4, "film:0:conv1").is_err());
}

#[test]
fn bank_bookkeeping() {
    let mut b = bank(Arch::Transformer, "all-attn");
    let shared_before = b.shared.len();
    let base = b.fusion_numel();
    let per_copy = b.selected_numel();
    for t in 1..=10 {
        b.instantiate_task(t).unwrap();
        assert_eq!(b.fusion_numel(), base + t as usize * per_copy);
    }
    assert_eq!(b.tasks().count(), 10);
    assert_eq!(b.shared.len(), shared_before);
    for t in 1..=10 {
        let keys: BTreeSet<_> = b.task_tables(t).unwrap().keys().copied().collect();
        assert_eq!(keys, b.strategy.paths);
        assert!(keys.iter().all(|p| !b.shared.contains_key(p)));
    }
    assert!(b.instantiate_task(3).is_err());
    assert!(b.bind(11).is_err());
}

#[test]
fn copy_init_is_byte_equal_to_the_snapshot() {
    let mut b = bank(Arch::Film, "conv-last-layer");
    b.instantiate_task(1).unwrap();
    let path = *b.strategy.paths.iter().next().unwrap();
    perturb(b.module_mut(1, path).unwrap());
    b.instantiate_task(2).unwrap();
    let snap = b.init_snapshot();
    for (p, s) in b.task_tables(2).unwrap() {
        for (a, c) in s.iter().zip(snap[p].iter()) {
            assert_eq!(a.value.to_le_bytes(), c.value.to_le_bytes());
        }
    }
}

#[test]
fn copy_previous_follows_the_last_task() {
    let m = model(Arch::Film);
    let mut s = resolve_strategy(Arch::Film, 4, "mod-gamma").unwrap();
    s.init = TaskInit::CopyPrevious;
    let mut b = ParameterBank::new(m, s, SeedTree::new(1)).unwrap();
    b.instantiate_task(1).unwrap();
    let path = *b.strategy.paths.iter().next().unwrap();
    perturb(b.module_mut(1, path).unwrap());
    b.instantiate_task(2).unwrap();
    assert_eq!(
        fingerprint(b.task_tables(2).unwrap().values()),
        fingerprint(b.task_tables(1).unwrap().values())
    );
}

#[test]
fn monolithic_binds_agree() {
    let mut b = bank(Arch::Transformer, "monolithic");
    b.instantiate_task(1).unwrap();
    b.instantiate_task(2).unwrap();
    let ex = examples(4);
    assert_eq!(premise(&b, 1, &ex), premise(&b, 2, &ex));
    let h = b.shared_fingerprint();
    let _ = b.bind(1).unwrap();
    let _ = b.bind(2).unwrap();
    assert_eq!(b.shared_fingerprint(), h);
    b.freeze_set(Partition::Task(1), true).unwrap();
    assert_eq!(b.shared_fingerprint(), h);
}

#[test]
fn expert_tasks_are_disjoint() {
    for arch in [Arch::Film, Arch::Transformer] {
        let mut b = bank(arch, "expert");
        b.instantiate_task(1).unwrap();
        b.instantiate_task(2).unwrap();
        let ex = examples(4);
        let before = premise(&b, 1, &ex);
        assert_ne!(before, premise(&b, 2, &ex), "fresh copies should differ");
        let paths: Vec<_> = b.strategy.paths.iter().copied().collect();
        for p in paths {
            perturb(b.module_mut(2, p).unwrap());
        }
        assert_eq!(premise(&b, 1, &ex), before);
    }
}

#[test]
fn switching_tasks_swaps_only_selected_modules() {
    let mut b = bank(Arch::Transformer, "all-attn");
    b.instantiate_task(1).unwrap();
    b.instantiate_task(2).unwrap();
    let ex = examples(4);
    let before = premise(&b, 1, &ex);
    assert_eq!(before, premise(&b, 2, &ex));
    let p = *b.strategy.paths.iter().next().unwrap();
    perturb(b.module_mut(2, p).unwrap());
    assert_eq!(premise(&b, 1, &ex), before);
    assert_ne!(premise(&b, 2, &ex), before);
}

#[test]
fn frozen_shared_tables_survive_optimizer_steps() {
    let mut b = bank(Arch::Transformer, "last-layer");
    b.instantiate_task(1).unwrap();
    b.freeze_set(Partition::Shared, true).unwrap();
    b.freeze_set(Partition::Shared, true).unwrap();
    b.freeze_set(Partition::Task(1), false).unwrap();
    let shared = b.shared_fingerprint();
    let task = b.task_fingerprint(1).unwrap();
    let ex = examples(3);
    let toks: Vec<&[u16]> = ex.iter().map(|e| e.tokens.as_slice()).collect();
    let prem: Vec<&Raster> = ex.iter().map(|e| &e.premise).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
    for _ in 0..10 {
        let grads = {
            let view = b.bind(1).unwrap();
            let mut tape = Tape::new();
            let mut pass = Pass::train();
            let x = tape.constant(image_batch(&prem).unwrap());
            let f = vision(&mut tape, &view, x, &mut pass).unwrap();
            let lang = language(&mut tape, &b.config, &view, &toks).unwrap();
            let pooled = fuse(&mut tape, &b.config, &view, f, &lang, &mut pass).unwrap();
            let out = decode(&mut tape, &view, pooled).unwrap();
            let loss = project(&mut tape, out, 1).unwrap();
            tape.backward(loss).unwrap()
        };
        let mut stores = b.stores_mut(1).unwrap();
        for s in stores.iter_mut() {
            s.accumulate(&grads).unwrap();
        }
        adam.step(&mut stores);
    }
    assert_eq!(b.shared_fingerprint(), shared);
    assert_ne!(b.task_fingerprint(1).unwrap(), task);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn routing_reads_each_module_from_one_partition(mask in prop::collection::vec(any::<bool>(), 20), task in 1u16..4) {
        let arch = Arch::Transformer;
        let m = model(arch);
        let all = list_modules(arch, m.config.layers);
        let picked: Vec<ModulePath> = all.iter().zip(&mask).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
        let mut b = ParameterBank::new(m, SelectionStrategy::new("custom", picked), SeedTree::new(2)).unwrap();
        for t in 1..=3 {
            b.instantiate_task(t).unwrap();
        }
        let view = b.bind(task).unwrap();
        let task_ids: BTreeSet<StoreId> = b.task_tables(task).unwrap().values().map(|s| s.id()).collect();
        let shared_ids: BTreeSet<StoreId> = b.shared.values().map(|s| s.id()).collect();
        prop_assert!(task_ids.is_disjoint(&shared_ids));
        for p in &all {
            let id = view.module(*p).unwrap().id();
            let in_task = task_ids.contains(&id);
            let in_shared = shared_ids.contains(&id);
            prop_assert!(in_task ^ in_shared);
            prop_assert_eq!(in_task, b.strategy.paths.contains(p));
        }
    }
}
