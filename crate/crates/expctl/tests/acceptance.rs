//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 1 7`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lilac_autodiff::numcheck::suite;
use lilac_autodiff::{ParamStore, Parameter, StoreId, Tensor};
use lilac_core::analysis::{self, AccuracyMatrix, ModuleTrace, TaskTrace};
use lilac_core::data::instruction::enumerate_instructions;
use lilac_core::data::scene::wrong_subproblems;
use lilac_core::data::stream::partition;
use lilac_core::data::{build_stream, generate_example, Dataset, StreamConfig};
use lilac_core::model::{gradcheck, list_modules, Arch, ModelConfig, ModulePath};
use lilac_core::rng::SeedTree;
use lilac_core::trainer::{prepare, run_baseline, Baseline, FisherState, Hook, Phase, Prepared, ReservoirBuffer, RunOptions, TrainConfig};
use lilac_expctl::commands::Timing;
use lilac_expctl::{cmd_run, Experiment, ExperimentConfig, Options, RunResult};
use serde_json::json;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

const MINUTE: Duration = Duration::from_secs(60);

fn toy_stream(tasks: usize) -> StreamConfig {
    StreamConfig {
        train_per_instruction: 4,
        val_per_instruction: 1,
        test_per_instruction: 3,
        num_tasks: tasks,
        ..StreamConfig::desk(Dataset::TwoD)
    }
}

fn toy_train(arch: Arch) -> TrainConfig {
    TrainConfig {
        batch: 8,
        init_epochs: 2,
        adapt_epochs: 6,
        adapt_freq: 2,
        buffer: 16,
        ..TrainConfig::desk(arch, Dataset::TwoD)
    }
}

fn toy_prepared(arch: Arch, tasks: usize, cfg: &TrainConfig) -> Prepared<f32> {
    let stream = build_stream(&toy_stream(tasks), 21).unwrap();
    prepare(&stream, &ModelConfig::tiny(arch, Dataset::TwoD), cfg, SeedTree::new(4), "toy").unwrap()
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut cases = suite::op_cases();
    cases.extend(gradcheck::layer_cases());
    let mut worst: f64 = 0.0;
    for case in &cases {
        let out = suite::run(case, suite::TRIALS).map_err(|e| format!("{}: {e}", case.name))?;
        ensure(out.passed(), || format!("{}: {}", out.name, out.failures.join("; ")))?;
        worst = worst.max(out.worst);
    }
    within(start.elapsed(), MINUTE)?;
    Ok(format!(
        "{} cases x {} trials, h={}, worst rel err {worst:.1e} <= {}",
        cases.len(),
        suite::TRIALS,
        suite::STEP,
        suite::TOLERANCE
    ))
}

fn dataset_invariants() -> Check {
    let start = Instant::now();
    for ds in [Dataset::TwoD, Dataset::ThreeD] {
        let instrs = enumerate_instructions(ds);
        ensure(instrs.len() == 72, || format!("{ds}: {} instructions", instrs.len()))?;
        let distinct: BTreeSet<String> = instrs.iter().map(|i| format!("{i:?}")).collect();
        ensure(distinct.len() == 72, || format!("{ds}: duplicate instructions"))?;

        let (init, groups) = partition(ds);
        let task_ids: Vec<u16> = groups.iter().flatten().copied().collect();
        ensure(init.len() == 12 && task_ids.len() == 60, || {
            format!("{ds}: {} init + {} task instructions", init.len(), task_ids.len())
        })?;
        let all: BTreeSet<u16> = init.iter().chain(&task_ids).copied().collect();
        ensure(all == (0..72).collect(), || format!("{ds}: partition does not cover 0..72 exactly once"))?;

        let mut rng = SeedTree::new(2024).child(&ds.to_string()).rng();
        for i in 0..10_000 {
            let instr = &instrs[i % 72];
            let g = generate_example(instr, &mut rng).map_err(|e| e.to_string())?;
            let pos = wrong_subproblems(instr, &g.scenes.premise, &g.scenes.positive).map_err(|e| e.to_string())?;
            let neg = wrong_subproblems(instr, &g.scenes.premise, &g.scenes.negative).map_err(|e| e.to_string())?;
            ensure(pos.is_empty() && neg == vec![g.scenes.corrupted], || {
                format!("{ds} example {i}: positive wrong {pos:?}, negative wrong {neg:?}")
            })?;
            ensure(g.example.positive != g.example.negative, || format!("{ds} example {i}: identical outcomes"))?;
        }
    }
    within(start.elapsed(), 2 * MINUTE)?;
    Ok("2 x 10000 examples with one corrupted subproblem; 72 instructions; 60 + 12 partition".into())
}

fn ac_schedule() -> Check {
    let start = Instant::now();
    let mut cfg = toy_train(Arch::Transformer);
    cfg.adapt_epochs = 30;
    cfg.adapt_freq = 6;
    let prep = toy_prepared(Arch::Transformer, 2, &cfg);
    let out = run_baseline(&prep, &Baseline::ac("all-attn", Hook::None), &cfg, SeedTree::new(5), "ac", RunOptions::default())
        .map_err(|e| e.to_string())?;
    for t in &prep.tasks {
        let epochs: Vec<usize> = out
            .logs
            .iter()
            .filter(|l| l.task == t.task_id && l.phase == Phase::Consolidate)
            .map(|l| l.epoch)
            .collect();
        ensure(epochs == [6, 12, 18, 24, 30], || format!("task {}: consolidation epochs {epochs:?}", t.task_id))?;
    }
    ensure(out.consolidations == 10, || format!("{} consolidations over 2 tasks", out.consolidations))?;
    ensure(out.hash_checks.len() == 2 * 35, || format!("{} hash checks", out.hash_checks.len()))?;
    let broken: Vec<_> = out.hash_checks.iter().filter(|h| !h.holds()).collect();
    ensure(broken.is_empty(), || format!("hash checks violated: {broken:?}"))?;
    within(start.elapsed(), 5 * MINUTE)?;
    Ok(format!("5 consolidations per task, {} hash checks hold", out.hash_checks.len()))
}

fn expert_zero_forgetting() -> Check {
    let start = Instant::now();
    let cfg = toy_train(Arch::Film);
    let prep = toy_prepared(Arch::Film, 4, &cfg);
    let out = run_baseline(&prep, &Baseline::joint("expert", Hook::None), &cfg, SeedTree::new(6), "expert", RunOptions::default())
        .map_err(|e| e.to_string())?;
    let a = &out.matrix;
    for t in 1..=4 {
        ensure(a.get(t, t).to_bits() == a.get(4, t).to_bits(), || {
            format!("task {t}: A_tt {} vs A_Tt {}", a.get(t, t), a.get(4, t))
        })?;
    }
    let cf = analysis::cf(a).map_err(|e| e.to_string())?;
    ensure(cf == 0.0, || format!("CF {cf}"))?;
    within(start.elapsed(), 10 * MINUTE)?;
    Ok("A_tt == A_Tt bitwise for 4 tasks, CF = 0".into())
}

/// Desk-scale transformer runs on 2D for three seeds, shared by the
/// forgetting and specialisation criteria.
struct DeskRuns {
    results: Vec<RunResult>,
    timings: Vec<Timing>,
}

fn desk_runs() -> Result<DeskRuns, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let doc = json!({
        "dataset": "2d",
        "arch": "transformer",
        "scale": "desk",
        "baselines": ["sft", "all-attn"],
        "seeds": [0, 1, 2]
    });
    let exp = ExperimentConfig::parse(&doc.to_string())
        .and_then(|c| c.resolve(tmp.path()))
        .map_err(|e| e.to_string())?;
    let threads = lilac_expctl::output::threads_from_env().map_err(|e| e.to_string())?;
    let s = cmd_run(&exp, Options { force: false, threads }).map_err(|e| e.to_string())?;
    let mut timings = Vec::new();
    for r in &s.results {
        let p = s.dir.join(format!("seed{}/{}/timing.json", r.seed, r.baseline));
        let text = fs::read_to_string(&p).map_err(|e| e.to_string())?;
        timings.push(serde_json::from_str(&text).map_err(|e| e.to_string())?);
    }
    Ok(DeskRuns { results: s.results, timings })
}

fn of<'a>(runs: &'a DeskRuns, baseline: &str) -> Vec<&'a RunResult> {
    runs.results.iter().filter(|r| r.baseline == baseline).collect()
}

fn forgetting(runs: &Result<DeskRuns, String>) -> Check {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let sft = of(runs, "sft");
    let cfs: Vec<f64> = sft.iter().map(|r| r.cf.unwrap_or(f64::NAN)).collect();
    let mean = analysis::mean(&cfs);
    // Each seed's preparation plus its monolithic run.
    let secs: f64 = runs.timings.iter().filter(|t| t.baseline == "sft").map(|t| t.prepare_seconds + t.wall_seconds).sum();
    within(Duration::from_secs_f64(secs), 30 * MINUTE)?;
    ensure(sft.len() == 3 && mean > 0.05, || format!("mean CF {mean:.4} over {} seeds ({cfs:?})", sft.len()))?;
    Ok(format!("SFT mean CF {mean:.4} > 0.05 over 3 seeds ({cfs:.3?})"))
}

fn specialisation(runs: &Result<DeskRuns, String>) -> Check {
    let runs = runs.as_ref().map_err(Clone::clone)?;
    let acc = |b: &str| of(runs, b).iter().map(|r| r.acc).collect::<Vec<f64>>();
    let (sft, attn) = (acc("sft"), acc("all-attn"));
    let (ms, ma) = (analysis::mean(&sft), analysis::mean(&attn));
    let secs: f64 = runs.timings.iter().map(|t| t.wall_seconds).sum::<f64>()
        + runs.timings.iter().filter(|t| t.baseline == "sft").map(|t| t.prepare_seconds).sum::<f64>();
    within(Duration::from_secs_f64(secs), 60 * MINUTE)?;
    ensure(sft.len() >= 3 && attn.len() == sft.len() && ma > ms, || {
        format!("ACC all-attn {ma:.4} vs SFT {ms:.4} ({attn:.3?} vs {sft:.3?})")
    })?;
    Ok(format!("ACC all-attn {ma:.4} > SFT {ms:.4} over {} seeds", sft.len()))
}

fn metric_formulas() -> Check {
    let m = |rows: &[&[f64]]| AccuracyMatrix {
        tasks: rows[0].len(),
        rows: rows.iter().map(|r| r.to_vec()).collect(),
    };
    let close = |a: f64, b: f64, tol: f64, what: &str| ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b}"));
    let e = |r: lilac_core::Result<f64>| r.map_err(|e| e.to_string());
    close(e(analysis::acc(&m(&[&[0.8; 3], &[0.8; 3], &[0.8; 3], &[0.8; 3]])))?, 0.8, 1e-12, "acc constant")?;
    close(e(analysis::acc(&m(&[&[0.5, 0.5], &[0.9, 0.5], &[0.6, 1.0]])))?, 0.8, 1e-12, "acc last row")?;
    let two = m(&[&[0.5, 0.5], &[1.0, 0.7], &[0.5, 0.9]]);
    close(e(analysis::cf(&two))?, 0.25, 1e-12, "cf")?;
    close(e(analysis::ft(&two))?, 0.2, 1e-12, "ft")?;
    close(e(analysis::cf(&m(&[&[0.3, 0.4], &[0.6, 0.4], &[0.6, 0.7]])))?, 0.0, 0.0, "cf without change")?;
    ensure(analysis::ft(&m(&[&[0.3, 0.4], &[0.6, 0.4]])).is_err(), || "ft without row 0 must fail".into())?;
    close(analysis::delta_acc(0.812, 0.511), 0.301, 1e-12, "delta acc")?;
    close(analysis::delta_acc(0.511, 0.812), -0.301, 1e-12, "delta acc antisymmetry")?;
    close(analysis::delta_acc(0.5, 0.5), 0.0, 0.0, "delta acc self")?;
    let v = [0.3, -1.0, 2.5, 4.0];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    close(e(analysis::pearson(&v, &v))?, 1.0, 1e-12, "pearson(v, v)")?;
    close(e(analysis::pearson(&v, &neg))?, -1.0, 1e-12, "pearson(v, -v)")?;
    close(e(analysis::pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]))?, 0.9819, 1e-4, "pearson hand value")?;
    let trace = |weight_l1: f64, act_l1: f64| ModuleTrace {
        numel: 8,
        tasks: BTreeMap::from([(1, TaskTrace { weight_l1, grad_l1: 0.0, act_l1 })]),
    };
    close(e(analysis::is_grad(&trace(8.0, 0.0)))?, 3.847, 1e-3, "is_grad hand value")?;
    close(e(analysis::is_act(&trace(0.0, 4.0)))?, 1.924, 1e-3, "is_act hand value")?;
    Ok("acc 0.8, cf 0.25, ft 0.2, delta acc 0.301, pearson 0.9819, is_grad 3.847, is_act 1.924".into())
}

fn importance_oracles() -> Check {
    let cfg = toy_train(Arch::Film);
    let prep = toy_prepared(Arch::Film, 2, &cfg);
    let opts = RunOptions { importance: true, dump: true };
    let out = run_baseline(&prep, &Baseline::sft(), &cfg, SeedTree::new(12), "imp", opts).map_err(|e| e.to_string())?;
    let traces = out.traces.ok_or("no traces")?;
    let dump = out.dump.ok_or("no dump")?;
    let mut brute: BTreeMap<ModulePath, ModuleTrace> = BTreeMap::new();
    let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
    let mut add = |task: u16, path: ModulePath, f: &dyn Fn(&mut TaskTrace)| {
        let m = brute.entry(path).or_default();
        m.numel = traces[&path].numel;
        f(m.tasks.entry(task).or_default());
    };
    for (task, path, g) in &dump.grads {
        add(*task, *path, &|t| t.grad_l1 += l1(g));
    }
    for (task, path, w) in &dump.weights {
        add(*task, *path, &|t| t.weight_l1 += l1(w));
    }
    for (task, path, a) in &dump.acts {
        add(*task, *path, &|t| t.act_l1 += l1(a));
    }
    let modules = list_modules(Arch::Film, 4);
    ensure(traces.keys().copied().collect::<Vec<_>>() == modules, || "traces do not cover every module".into())?;
    let mut worst: f64 = 0.0;
    for (path, t) in &traces {
        let b = brute.get(path).ok_or_else(|| format!("{path} missing from dumps"))?;
        ensure(t.tasks.len() == 2, || format!("{path}: {} tasks traced", t.tasks.len()))?;
        for (x, y) in [
            (analysis::is_grad(t), analysis::is_grad(b)),
            (analysis::is_act(t), analysis::is_act(b)),
        ] {
            let (x, y) = (x.map_err(|e| e.to_string())?, y.map_err(|e| e.to_string())?);
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("max abs error {worst:e}"))?;
    Ok(format!("{} modules over 2 tasks, max abs error {worst:.1e} <= 1e-5", traces.len()))
}

fn reservoir() -> Check {
    const CAP: usize = 3000;
    const N: usize = 30_000;
    const TRIALS: usize = 200;
    const BLOCK: usize = 1000;
    let mut kept = vec![0u32; N];
    for trial in 0..TRIALS {
        let mut rng = SeedTree::new(99).index(trial as u64).rng();
        let mut b = ReservoirBuffer::new(CAP);
        for i in 0..N {
            b.insert(i, &mut rng);
        }
        for &i in b.items() {
            kept[i] += 1;
        }
    }
    let target = CAP as f64 / N as f64;
    let mut worst: f64 = 0.0;
    // Per-item frequencies pooled over blocks of consecutive insertions.
    for (k, block) in kept.chunks(BLOCK).enumerate() {
        let f = block.iter().map(|&c| c as f64).sum::<f64>() / (block.len() * TRIALS) as f64;
        let rel = (f - target).abs() / target;
        worst = worst.max(rel);
        ensure(rel <= 0.1, || format!("block {k}: retention {f:.4} vs {target}"))?;
    }
    Ok(format!("retention {target} within {:.2}% relative over {TRIALS} trials", 100.0 * worst))
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let doc = json!({
        "dataset": "2d",
        "arch": "transformer",
        "baselines": ["sft", "all-attn+ewc", "er"],
        "seeds": [8],
        "stream": {"train_per_instruction": 4, "val_per_instruction": 1, "test_per_instruction": 3, "num_tasks": 3},
        "model": {"vision_channels": [4, 8, 8], "proj_dim": 16, "d_model": 8, "heads": 2, "ffn_dim": 8, "word_dim": 8, "instr_dim": 8},
        "train": {"batch": 8, "init_epochs": 2, "adapt_epochs": 4, "adapt_freq": 2, "buffer": 16}
    });
    let run = |sub: &str| -> Result<Experiment, String> {
        let e = ExperimentConfig::parse(&doc.to_string())
            .and_then(|c| c.resolve(&tmp.path().join(sub)))
            .map_err(|e| e.to_string())?;
        cmd_run(&e, Options::default()).map_err(|e| e.to_string())?;
        Ok(e)
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut compared = 0;
    let mut names = vec!["aggregate.json".to_string()];
    names.extend(a.baselines.iter().map(|x| format!("seed8/{}/result.json", lilac_expctl::output::slug(&x.to_string()))));
    for name in names {
        let (x, y) = (fs::read(a.dir("run").join(&name)), fs::read(b.dir("run").join(&name)));
        let (x, y) = (x.map_err(|e| e.to_string())?, y.map_err(|e| e.to_string())?);
        ensure(x == y, || format!("{name} differs"))?;
        compared += 1;
    }
    Ok(format!("{compared} result files byte-identical across two runs"))
}

fn ewc_contracts() -> Check {
    let path = list_modules(Arch::Transformer, 1)[0];
    let tables = |values: &[f64]| {
        let mut s = ParamStore::new(StoreId(1));
        s.insert(Parameter::new("weight", Tensor::new(vec![values.len()], values.to_vec()).unwrap(), true))
            .unwrap();
        BTreeMap::from([(path, s)])
    };
    let key = (path, "weight".to_string());
    let anchor = tables(&[0.5, -1.0, 2.0, 0.0]);
    let mut rng = SeedTree::new(11).rng();
    let squared = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..4).map(|_| (rand::Rng::random::<f64>(rng) * 4.0 - 2.0).powi(2)).collect()
    };
    let f1 = squared(&mut rng);
    let f2 = squared(&mut rng);
    let mut ewc = FisherState::new(0.9, 20_000.0);
    ewc.update(BTreeMap::from([(key.clone(), f1.clone())]), &anchor).map_err(|e| e.to_string())?;
    ensure(ewc.penalty(&anchor) == 0.0, || format!("penalty at anchor {}", ewc.penalty(&anchor)))?;
    let moved = tables(&[0.7, -1.1, 2.0, 0.3]);
    ensure(ewc.penalty(&moved) > 0.0, || "penalty away from anchor must be positive".into())?;
    ewc.update(BTreeMap::from([(key.clone(), f2.clone())]), &moved).map_err(|e| e.to_string())?;
    ensure(ewc.penalty(&moved) == 0.0, || "penalty at the new anchor".into())?;
    let f = &ewc.fisher[&key];
    for i in 0..4 {
        let want = 0.9 * f1[i] + f2[i];
        ensure((f[i] - want).abs() <= 1e-12, || format!("F2[{i}] {} vs {want}", f[i]))?;
    }
    for _ in 0..50 {
        let g = squared(&mut rng);
        ewc.update(BTreeMap::from([(key.clone(), g)]), &moved).map_err(|e| e.to_string())?;
        ensure(ewc.fisher.values().flatten().all(|v| *v >= 0.0), || "negative Fisher entry".into())?;
    }
    let mut bad = vec![1.0; 4];
    bad[2] = -1e-3;
    ensure(ewc.update(BTreeMap::from([(key, bad)]), &moved).is_err(), || "negative Fisher update accepted".into())?;
    Ok("penalty(anchor) = 0, Fisher >= 0, F2 = 0.9 F1 + F_task2".into())
}

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);

    let desk = if want(5) || want(6) {
        let start = Instant::now();
        let r = catch_unwind(desk_runs).unwrap_or_else(|_| Err("desk runs panicked".into()));
        println!("desk runs finished in {:.0?}", start.elapsed());
        Some(r)
    } else {
        None
    };
    let desk_ref = desk.as_ref();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Check>)> = vec![
        (1, "gradient correctness", Box::new(gradients)),
        (2, "dataset invariants", Box::new(dataset_invariants)),
        (3, "A&C scheduling", Box::new(ac_schedule)),
        (4, "expert zero forgetting", Box::new(expert_zero_forgetting)),
        (5, "forgetting is real", Box::new(move || forgetting(desk_ref.unwrap()))),
        (6, "specialisation helps", Box::new(move || specialisation(desk_ref.unwrap()))),
        (7, "metric formulas", Box::new(metric_formulas)),
        (8, "importance score oracles", Box::new(importance_oracles)),
        (9, "reservoir statistics", Box::new(reservoir)),
        (10, "run determinism", Box::new(determinism)),
        (11, "EWC contracts", Box::new(ewc_contracts)),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        if !want(*n) {
            continue;
        }
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let t = start.elapsed();
        match r {
            Ok(msg) => println!("criterion {n:>2} PASS  {name}: {msg} [{t:.1?}]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {msg} [{t:.1?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
