use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lilac_core::analysis;
use lilac_core::data::build_stream;
use lilac_expctl::commands::{aggregate, Aggregate, SWEEP_HEADER};
use lilac_expctl::output::csv_body;
use lilac_expctl::{cmd_gen, cmd_importance, cmd_run, cmd_sweep, CtlError, Experiment, ExperimentConfig, Options, RunResult, VERSION};
use serde_json::{json, Value};

fn toy(arch: &str, baselines: Value, seeds: Value) -> Value {
    json!({
        "dataset": "2d",
        "arch": arch,
        "baselines": baselines,
        "seeds": seeds,
        "stream": {"train_per_instruction": 4, "val_per_instruction": 1, "test_per_instruction": 3, "num_tasks": 3},
        "model": {"vision_channels": [4, 8, 8], "proj_dim": 16, "d_model": 8, "heads": 2, "ffn_dim": 8,
                  "word_dim": 8, "instr_dim": 8, "layers": 2},
        "train": {"batch": 8, "init_epochs": 2, "adapt_epochs": 4, "adapt_freq": 2, "buffer": 16}
    })
}

fn experiment(doc: &Value, root: &Path) -> Experiment {
    let mut e = ExperimentConfig::parse(&doc.to_string()).unwrap().resolve(root).unwrap();
    e.root = root.to_path_buf();
    e
}

fn write_config(dir: &Path, name: &str, doc: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    p
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn opts(threads: usize) -> Options {
    Options { force: false, threads }
}

#[test]
fn config_hash_ignores_layout_and_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = toy("film", json!(["sft"]), json!([0, 1]));
    let a = experiment(&doc, tmp.path());
    let reordered = r#"{"seeds":[0,1],"arch":"film","dataset":"2d","baselines":["sft"],
        "train":{"adapt_freq":2,"adapt_epochs":4,"batch":8,"init_epochs":2,"buffer":16},
        "model":{"layers":2,"vision_channels":[4,8,8],"proj_dim":16,"d_model":8,"heads":2,"ffn_dim":8,"word_dim":8,"instr_dim":8},
        "stream":{"num_tasks":3,"train_per_instruction":4,"val_per_instruction":1,"test_per_instruction":3},
        "output_dir":"elsewhere"}"#;
    let b = ExperimentConfig::parse(reordered).unwrap().resolve(tmp.path()).unwrap();
    assert_eq!(a.hash, b.hash);
    assert_eq!(a.hash.len(), 64);
    assert_eq!(b.root, tmp.path().join("elsewhere"));

    // Spelling out a preset value leaves the effective config unchanged.
    let mut explicit = doc.clone();
    explicit["scale"] = json!("desk");
    explicit["train"]["temperature"] = json!(0.5);
    assert_eq!(experiment(&explicit, tmp.path()).hash, a.hash);

    let mut mutated = doc.clone();
    mutated["train"]["lr"] = json!(1e-3);
    assert_ne!(experiment(&mutated, tmp.path()).hash, a.hash);
}

#[test]
fn invalid_configs_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        json!({"dataset": "4d", "arch": "film"}),
        json!({"dataset": "2d", "arch": "lstm"}),
        json!({"dataset": "2d", "arch": "film", "seeds": []}),
        json!({"dataset": "2d", "arch": "film", "seeds": [1, 1]}),
        json!({"dataset": "2d", "arch": "film", "extra": 1}),
        json!({"dataset": "2d", "arch": "film", "train": {"lr2": 1}}),
        json!({"dataset": "2d", "arch": "film", "train": {"adapt_freq": 0}}),
        json!({"dataset": "2d", "arch": "film", "model": {"arch": "transformer"}}),
        json!({"dataset": "2d", "arch": "film", "baselines": ["all-attn"]}),
        json!({"dataset": "2d", "arch": "film", "baselines": ["nonsense"]}),
        json!({"dataset": "2d", "arch": "film", "baselines": [["film:9:conv1"]]}),
        json!({"dataset": "2d", "arch": "film", "baselines": ["sft", "sft"]}),
        json!({"dataset": "2d", "arch": "transformer", "model": {"heads": 5}}),
    ];
    for doc in cases {
        let r = ExperimentConfig::parse(&doc.to_string()).and_then(|c| c.resolve(tmp.path()));
        match r {
            Err(e @ CtlError::Config(_)) => assert_eq!(e.exit_code(), 2),
            other => panic!("{doc}: expected a config error, got {other:?}"),
        }
    }
}

#[test]
fn paper_scale_2d_stream_has_36000_training_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let e = experiment(&json!({"dataset": "2d", "arch": "film", "scale": "paper"}), tmp.path());
    assert_eq!(e.settings.train.batch, 128);
    assert_eq!(e.settings.train.adapt_epochs, 30);
    assert_eq!(build_stream(&e.settings.stream, 0).unwrap().total_train(), 36_000);
}

#[test]
fn gen_bytes_depend_only_on_config_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = toy("film", json!([]), json!([5, 6]));
    let a = cmd_gen(&experiment(&doc, &tmp.path().join("a")), opts(2)).unwrap();
    let b = cmd_gen(&experiment(&doc, &tmp.path().join("b")), opts(1)).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        for name in ["train.lilc", "val.lilc", "test.lilc", "manifest.json"] {
            assert_eq!(fs::read(x.dir.join(name)).unwrap(), fs::read(y.dir.join(name)).unwrap(), "{name}");
        }
    }
    assert_ne!(
        fs::read(a[0].dir.join("train.lilc")).unwrap(),
        fs::read(a[1].dir.join("train.lilc")).unwrap()
    );
    let train = a[0].manifest.counts.iter().find(|(n, _)| n == "train").unwrap().1;
    // Three tasks of six instructions plus twelve initialisation instructions, four each.
    assert_eq!(train, (3 * 6 + 12) * 4);
}

#[test]
fn ten_seeds_give_ten_results_and_a_matching_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let e = experiment(&toy("film", json!(["sft"]), json!(seeds)), tmp.path());
    let s = cmd_run(&e, opts(3)).unwrap();
    let results: Vec<PathBuf> = files(&s.dir).into_iter().filter(|p| p.ends_with("result.json")).collect();
    assert_eq!(results.len(), 10);

    let parsed: Vec<RunResult> = results.iter().map(|p| read_json(p)).collect();
    let on_disk: Aggregate = read_json(&s.dir.join("aggregate.json"));
    assert_eq!(on_disk, aggregate(&e, &parsed));
    assert_eq!(on_disk, s.aggregate);

    let accs: Vec<f64> = parsed.iter().map(|r| r.acc).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let a = &on_disk.baselines[0];
    assert!((a.acc.mean - mean).abs() < 1e-12);
    assert!((a.acc.stderr - sd / n.sqrt()).abs() < 1e-12);
    for r in &parsed {
        assert!((r.acc - analysis::acc(&r.matrix).unwrap()).abs() == 0.0);
        assert_eq!(r.matrix.rows.len(), 4);
    }
}

#[test]
fn runs_are_byte_identical_across_invocations_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = toy("transformer", json!(["sft", "all-attn+er", "expert"]), json!([3, 4]));
    let a = cmd_run(&experiment(&doc, &tmp.path().join("a")), opts(1)).unwrap();
    let b = cmd_run(&experiment(&doc, &tmp.path().join("b")), opts(2)).unwrap();
    let (fa, fb) = (files(&a.dir), files(&b.dir));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a.dir).unwrap(), y.strip_prefix(&b.dir).unwrap());
        if x.ends_with("timing.json") {
            continue;
        }
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn every_output_file_records_hash_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    let e = experiment(&toy("film", json!(["sft", "mtl"]), json!([1])), tmp.path());
    cmd_gen(&e, opts(1)).unwrap();
    cmd_sweep(std::slice::from_ref(&e), opts(1)).unwrap();
    let all = files(&tmp.path().join(e.short_hash()));
    assert!(all.len() > 10);
    for p in all.iter().filter(|p| !p.extension().is_some_and(|x| x == "lilc")) {
        let text = fs::read_to_string(p).unwrap();
        let head = text.lines().next().unwrap_or_default();
        let stamped = if p.extension().is_some_and(|x| x == "json") {
            let v: Value = serde_json::from_str(&text).unwrap();
            v["config_hash"] == json!(e.hash) && v["version"] == json!(VERSION)
        } else {
            head.contains(&e.hash) && head.contains(VERSION)
        };
        assert!(stamped, "{}", p.display());
    }
}

#[test]
fn existing_outputs_are_refused_and_mutations_get_their_own_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = toy("film", json!(["sft"]), json!([2]));
    let e = experiment(&doc, tmp.path());
    let first = cmd_run(&e, opts(1)).unwrap();
    let before: Vec<(PathBuf, Vec<u8>)> = files(&first.dir).into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect();

    match cmd_run(&e, opts(1)) {
        Err(e @ CtlError::Refused(_)) => assert_eq!(e.exit_code(), 2),
        other => panic!("expected refusal, got {other:?}"),
    }
    let mut mutated = doc.clone();
    mutated["train"]["temperature"] = json!(0.25);
    let m = experiment(&mutated, tmp.path());
    let second = cmd_run(&m, opts(1)).unwrap();
    assert_ne!(second.dir, first.dir);
    for (p, bytes) in &before {
        assert_eq!(&fs::read(p).unwrap(), bytes);
    }
    let forced = cmd_run(&e, Options { force: true, threads: 1 }).unwrap();
    assert_eq!(forced.dir, first.dir);
    assert_eq!(fs::read(first.dir.join("aggregate.json")).unwrap(), before.iter().find(|(p, _)| p.ends_with("aggregate.json")).unwrap().1);
}

#[test]
fn sweep_table_has_one_row_per_baseline_and_expert_has_no_forgetting() {
    let tmp = tempfile::tempdir().unwrap();
    let baselines = json!(["sft", "er", "ewc", "mtl", "expert", "all-attn", ["transformer:0:attn", "transformer:1:ffn1"]]);
    let e = experiment(&toy("transformer", baselines, json!([1, 2, 3])), tmp.path());
    let out = cmd_sweep(std::slice::from_ref(&e), opts(3)).unwrap();
    let text = fs::read_to_string(out.dir.join("table.csv")).unwrap();
    let mut lines = csv_body(&text);
    assert_eq!(lines.next().unwrap(), SWEEP_HEADER);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), e.baselines.len());

    let expert = rows.iter().find(|r| r.starts_with("2d,transformer,expert,")).unwrap();
    let cols: Vec<&str> = expert.split(',').collect();
    assert_eq!((cols[6], cols[7]), ("0", "0"));
    let mtl = rows.iter().find(|r| r.starts_with("2d,transformer,mtl,")).unwrap();
    assert!(mtl.contains(",,,,,"));
    assert!(rows.iter().any(|r| r.contains("\"transformer:0:attn,transformer:1:ffn1\"")));

    // Mean and standard error recomputed from the per-seed result files.
    let sft: Vec<f64> = e
        .settings
        .seeds
        .iter()
        .map(|s| read_json::<RunResult>(&e.dir("run").join(format!("seed{s}/sft/result.json"))).acc)
        .collect();
    let n = sft.len() as f64;
    let mean = sft.iter().sum::<f64>() / n;
    let se = (sft.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let row: Vec<f64> = rows
        .iter()
        .find(|r| r.starts_with("2d,transformer,sft,"))
        .unwrap()
        .split(',')
        .skip(4)
        .take(2)
        .map(|c| c.parse().unwrap())
        .collect();
    assert!((row[0] - mean).abs() < 1e-12 && (row[1] - se).abs() < 1e-12);

    let wide = fs::read_to_string(out.dir.join("table_wide.csv")).unwrap();
    assert_eq!(csv_body(&wide).next().unwrap(), "baseline,2d/transformer");
    assert_eq!(csv_body(&wide).count(), e.baselines.len() + 1);
}

#[test]
fn importance_grids_cover_every_module_by_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let e = experiment(&toy("film", json!([]), json!([7])), tmp.path());
    let out = cmd_importance(&e, opts(1)).unwrap();
    let layers = e.settings.model.layers;
    let kinds = e.settings.arch.kinds();
    assert_eq!(out.summary.report.len(), kinds.len() * layers);

    let report = fs::read_to_string(out.dir.join("importance.csv")).unwrap();
    let mut lines = csv_body(&report);
    assert_eq!(lines.next().unwrap(), "module,layer,kind,is_grad,is_act,delta_acc");
    assert_eq!(lines.count(), kinds.len() * layers);

    for grid in ["delta_acc_grid.csv", "ac_vs_joint_grid.csv"] {
        let text = fs::read_to_string(out.dir.join(grid)).unwrap();
        let rows: Vec<&str> = csv_body(&text).collect();
        assert_eq!(rows[0], "module,layer0,layer1");
        assert_eq!(rows.len(), kinds.len() + 1);
        for (row, kind) in rows[1..].iter().zip(kinds) {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols[0], kind.name());
            assert_eq!(cols.len(), layers + 1);
        }
    }
    let pearson = fs::read_to_string(out.dir.join("pearson.csv")).unwrap();
    let rows: Vec<&str> = csv_body(&pearson).collect();
    assert_eq!(rows[0], "score,r");
    assert!(rows[1].starts_with("is_grad,") && rows[2].starts_with("is_act,"));

    // Each ΔACC is the A&C accuracy minus the monolithic accuracy of the same seed.
    let s = &out.summary.seeds[0];
    for (row, m) in out.summary.report.iter().zip(&s.modules) {
        assert_eq!(row.path, m.path);
        assert_eq!(row.delta_acc, m.acc_ac - s.acc_sft);
    }
}

fn lilac(args: &[&str], threads: Option<&str>) -> std::process::Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lilac"));
    c.args(args).env_remove("LILAC_THREADS");
    if let Some(t) = threads {
        c.env("LILAC_THREADS", t);
    }
    c.output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "toy.json", &toy("film", json!(["sft"]), json!([0, 1])));
    let out = tmp.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let ok = lilac(&["run", "--config", c, "--out", o, "--seed", "4"], Some("2"));
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let runs: Vec<PathBuf> = files(&out).into_iter().filter(|p| p.ends_with("result.json")).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].to_str().unwrap().contains("seed4"));

    assert_eq!(lilac(&["run", "--config", c, "--out", o, "--seed", "4"], None).status.code(), Some(2));
    assert_eq!(lilac(&["run", "--config", c, "--out", o, "--seed", "4", "--force"], None).status.code(), Some(0));

    let bad = write_config(tmp.path(), "bad.json", &json!({"dataset": "4d", "arch": "film"}));
    assert_eq!(lilac(&["gen", "--config", bad.to_str().unwrap()], None).status.code(), Some(2));
    assert_eq!(lilac(&["gen", "--config", "/nonexistent/cfg.json"], None).status.code(), Some(2));
    assert_eq!(lilac(&["run", "--config", c, "--out", o], Some("0")).status.code(), Some(2));
    assert_eq!(lilac(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(lilac(&["run", "--config", c, "--config", c], None).status.code(), Some(2));

    // An output root that is a regular file fails at run time.
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    let r = lilac(&["gen", "--config", c, "--out", blocker.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
}
