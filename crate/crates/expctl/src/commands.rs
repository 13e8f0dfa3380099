//! The four subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use lilac_core::analysis::{self, AccuracyMatrix, ImportanceReport, ImportanceRow};
use lilac_core::data::lilc::{export_stream, Manifest};
use lilac_core::data::{build_stream, TaskStream};
use lilac_core::model::{list_modules, ModulePath};
use lilac_core::rng::SeedTree;
use lilac_core::trainer::{prepare, run_baseline, Baseline, EpochLog, Hook, RunOptions};
use lilac_core::Prepared32;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, Experiment};
use crate::error::{CtlError, Result};
use crate::output::{claim, csv_field, csv_stamp, parallel_map, slug, write_json, VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Options {
    pub force: bool,
    pub threads: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self { force: false, threads: 1 }
    }
}

fn seed_dir(seed: u64) -> String {
    format!("seed{seed}")
}

// ---------------------------------------------------------------- gen

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StampedManifest {
    pub config_hash: String,
    pub version: String,
    #[serde(flatten)]
    pub manifest: Manifest,
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    pub seed: u64,
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Generates and exports the stream of every seed into `gen/seed<N>/`.
pub fn cmd_gen(exp: &Experiment, opts: Options) -> Result<Vec<GenOutput>> {
    let dir = claim(&exp.dir("gen"), opts.force)?;
    parallel_map(&exp.settings.seeds, opts.threads, |&seed| {
        let stream = build_stream(&exp.settings.stream, seed)?;
        let out = dir.join(seed_dir(seed));
        let manifest = export_stream(&stream, seed, &out)?;
        let stamped = StampedManifest {
            config_hash: exp.hash.clone(),
            version: VERSION.into(),
            manifest: manifest.clone(),
        };
        write_json(&out.join("manifest.json"), &stamped)?;
        Ok(GenOutput { seed, dir: out, manifest })
    })
}

// ---------------------------------------------------------------- run

/// Everything about one (seed, baseline) run that is a function of the
/// config. Wall time lives in [`Timing`] so this file is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub baseline: String,
    pub task_instructions: Vec<Vec<u16>>,
    pub matrix: AccuracyMatrix,
    pub acc: f64,
    /// Absent for multi-task runs, which have no sequential matrix.
    pub cf: Option<f64>,
    pub ft: Option<f64>,
    pub consolidations: usize,
    pub hash_checks: usize,
    pub hash_checks_hold: bool,
    pub fusion_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub baseline: String,
    pub prepare_seconds: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn of(x: &[f64]) -> Self {
        Self {
            mean: analysis::mean(x),
            stderr: analysis::stderr(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineAggregate {
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub acc: Stat,
    pub cf: Option<Stat>,
    pub ft: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_hash: String,
    pub version: String,
    pub baselines: Vec<BaselineAggregate>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    /// Seed-major, baselines in config order.
    pub results: Vec<RunResult>,
    pub aggregate: Aggregate,
}

fn stamp_line(hash: &str) -> String {
    serde_json::json!({ "config_hash": hash, "version": VERSION }).to_string()
}

fn jsonl(hash: &str, logs: &[EpochLog]) -> Result<String> {
    let mut s = stamp_line(hash);
    s.push('\n');
    for l in logs {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    Ok(s)
}

fn prepared(exp: &Experiment, seed: u64, run_id: &str) -> Result<(TaskStream, Prepared32)> {
    let s = &exp.settings;
    let stream = build_stream(&s.stream, seed)?;
    let prep = prepare::<f32>(&stream, &s.model, &s.train, SeedTree::new(seed), run_id)?;
    Ok((stream, prep))
}

pub fn aggregate(exp: &Experiment, results: &[RunResult]) -> Aggregate {
    let baselines = exp
        .settings
        .baselines
        .iter()
        .map(|name| {
            let rows: Vec<&RunResult> = results.iter().filter(|r| &r.baseline == name).collect();
            let opt = |f: fn(&RunResult) -> Option<f64>| -> Option<Stat> {
                rows.iter().map(|r| f(r)).collect::<Option<Vec<f64>>>().map(|v| Stat::of(&v))
            };
            BaselineAggregate {
                baseline: name.clone(),
                seeds: rows.iter().map(|r| r.seed).collect(),
                acc: Stat::of(&rows.iter().map(|r| r.acc).collect::<Vec<_>>()),
                cf: opt(|r| r.cf),
                ft: opt(|r| r.ft),
            }
        })
        .collect();
    Aggregate {
        config_hash: exp.hash.clone(),
        version: VERSION.into(),
        baselines,
    }
}

fn run_seed(exp: &Experiment, dir: &std::path::Path, seed: u64) -> Result<Vec<RunResult>> {
    let seed_out = dir.join(seed_dir(seed));
    fs::create_dir_all(&seed_out)?;
    let run_id = format!("{}/{}", exp.short_hash(), seed_dir(seed));
    let start = Instant::now();
    let (stream, prep) = prepared(exp, seed, &run_id)?;
    let prepare_seconds = start.elapsed().as_secs_f64();
    fs::write(seed_out.join("init.jsonl"), jsonl(&exp.hash, &prep.init_logs)?)?;
    let task_instructions: Vec<Vec<u16>> = stream.tasks.iter().map(|t| t.instructions.clone()).collect();
    let mut results = Vec::new();
    for b in &exp.baselines {
        let name = b.to_string();
        let start = Instant::now();
        let out = run_baseline(
            &prep,
            b,
            &exp.settings.train,
            SeedTree::new(seed),
            &format!("{run_id}/{name}"),
            RunOptions::default(),
        )?;
        let wall_seconds = start.elapsed().as_secs_f64();
        let result = RunResult {
            config_hash: exp.hash.clone(),
            version: VERSION.into(),
            seed,
            baseline: name.clone(),
            task_instructions: task_instructions.clone(),
            acc: analysis::acc(&out.matrix)?,
            cf: analysis::cf(&out.matrix).ok(),
            ft: analysis::ft(&out.matrix).ok(),
            matrix: out.matrix,
            consolidations: out.consolidations,
            hash_checks: out.hash_checks.len(),
            hash_checks_hold: out.hash_checks.iter().all(|h| h.holds()),
            fusion_params: out.fusion_params,
        };
        let bdir = seed_out.join(slug(&name));
        fs::create_dir_all(&bdir)?;
        write_json(&bdir.join("result.json"), &result)?;
        fs::write(bdir.join("epochs.jsonl"), jsonl(&exp.hash, &out.logs)?)?;
        write_json(
            &bdir.join("timing.json"),
            &Timing {
                config_hash: exp.hash.clone(),
                version: VERSION.into(),
                seed,
                baseline: name,
                prepare_seconds,
                wall_seconds,
            },
        )?;
        results.push(result);
    }
    Ok(results)
}

/// Runs every baseline for every seed. Layout:
/// `run/seed<N>/init.jsonl`, `run/seed<N>/<baseline>/{result.json,
/// epochs.jsonl, timing.json}` and `run/aggregate.json`.
pub fn cmd_run(exp: &Experiment, opts: Options) -> Result<RunSummary> {
    if exp.baselines.is_empty() {
        return Err(CtlError::Config("no baselines to run".into()));
    }
    let dir = claim(&exp.dir("run"), opts.force)?;
    let per_seed = parallel_map(&exp.settings.seeds, opts.threads, |&seed| run_seed(exp, &dir, seed))?;
    let results: Vec<RunResult> = per_seed.into_iter().flatten().collect();
    let aggregate = aggregate(exp, &results);
    write_json(&dir.join("aggregate.json"), &aggregate)?;
    Ok(RunSummary { dir, results, aggregate })
}

// ---------------------------------------------------------------- sweep

pub const SWEEP_HEADER: &str =
    "dataset,arch,baseline,seeds,acc_mean,acc_stderr,cf_mean,cf_stderr,ft_mean,ft_stderr,acc_table";

fn pct(s: &Stat) -> String {
    format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.stderr)
}

fn cells(s: &Option<Stat>) -> String {
    match s {
        Some(s) => format!("{},{}", s.mean, s.stderr),
        None => ",".into(),
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub runs: Vec<RunSummary>,
    /// Long table: one row per config and baseline.
    pub table: String,
    /// Wide table: baselines by `dataset/arch` columns.
    pub wide: String,
}

/// Runs each config and tabulates ACC, CF and FT as mean and standard error
/// over seeds.
pub fn cmd_sweep(exps: &[Experiment], opts: Options) -> Result<SweepOutput> {
    let first = exps.first().ok_or_else(|| CtlError::Config("no configs to sweep".into()))?;
    let hash = if exps.len() == 1 {
        first.hash.clone()
    } else {
        sha256_hex(exps.iter().map(|e| e.hash.as_str()).collect::<Vec<_>>().join("\n").as_bytes())
    };
    let dir = first.root.join(&hash[..16]).join("sweep");
    if dir.exists() && !opts.force {
        return Err(CtlError::Refused(format!("{} exists (use --force)", dir.display())));
    }
    let runs = exps.iter().map(|e| cmd_run(e, opts)).collect::<Result<Vec<_>>>()?;
    let dir = claim(&dir, opts.force)?;

    let mut table = csv_stamp(&hash);
    table.push_str(SWEEP_HEADER);
    table.push('\n');
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<String> = Vec::new();
    let mut grid: BTreeMap<(String, String), String> = BTreeMap::new();
    for (exp, run) in exps.iter().zip(&runs) {
        let col = format!("{}/{}", exp.settings.dataset, exp.settings.arch);
        if !columns.contains(&col) {
            columns.push(col.clone());
        }
        for a in &run.aggregate.baselines {
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                exp.settings.dataset,
                exp.settings.arch,
                csv_field(&a.baseline),
                a.seeds.len(),
                a.acc.mean,
                a.acc.stderr,
                cells(&a.cf),
                cells(&a.ft),
                pct(&a.acc)
            ));
            if !rows.contains(&a.baseline) {
                rows.push(a.baseline.clone());
            }
            grid.insert((a.baseline.clone(), col.clone()), pct(&a.acc));
        }
    }
    let mut wide = csv_stamp(&hash);
    wide.push_str(&format!("baseline,{}\n", columns.join(",")));
    for r in &rows {
        let cols: Vec<&str> = columns
            .iter()
            .map(|c| grid.get(&(r.clone(), c.clone())).map_or("", String::as_str))
            .collect();
        wide.push_str(&format!("{},{}\n", csv_field(r), cols.join(",")));
    }
    fs::write(dir.join("table.csv"), &table)?;
    fs::write(dir.join("table_wide.csv"), &wide)?;
    Ok(SweepOutput { dir, runs, table, wide })
}

// ---------------------------------------------------------------- importance

/// Per-seed measurements for one module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleMeasure {
    pub path: ModulePath,
    pub is_grad: f64,
    pub is_act: f64,
    /// ACC with the module specialised under A&C.
    pub acc_ac: f64,
    /// ACC with the module specialised and trained jointly.
    pub acc_joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedImportance {
    pub seed: u64,
    pub acc_sft: f64,
    pub modules: Vec<ModuleMeasure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<SeedImportance>,
    pub report: Vec<ImportanceRow>,
    /// Undefined when either column has zero variance.
    pub pearson_grad: Option<f64>,
    pub pearson_act: Option<f64>,
    /// `ACC(A&C) − ACC(joint)` per module, averaged over seeds.
    pub ac_gain: Vec<(ModulePath, f64)>,
}

#[derive(Clone, Debug)]
pub struct ImportanceOutput {
    pub dir: PathBuf,
    pub summary: ImportanceSummary,
}

fn importance_seed(exp: &Experiment, seed: u64) -> Result<SeedImportance> {
    let s = &exp.settings;
    let run_id = format!("{}/importance/{}", exp.short_hash(), seed_dir(seed));
    let (_, prep) = prepared(exp, seed, &run_id)?;
    let root = SeedTree::new(seed);
    let run = |b: &Baseline, importance: bool| {
        run_baseline(
            &prep,
            b,
            &s.train,
            root,
            &format!("{run_id}/{b}"),
            RunOptions { importance, dump: false },
        )
    };
    let sft = run(&Baseline::sft(), true)?;
    let acc_sft = analysis::acc(&sft.matrix)?;
    let traces = sft
        .traces
        .ok_or_else(|| CtlError::Runtime("monolithic run recorded no importance traces".into()))?;
    let mut modules = Vec::new();
    for path in list_modules(s.arch, s.model.layers) {
        let trace = traces
            .get(&path)
            .ok_or_else(|| CtlError::Runtime(format!("no importance trace for {path}")))?;
        let name = path.to_string();
        let ac = run(&Baseline::ac(&name, Hook::None), false)?;
        let joint = run(&Baseline::joint(&name, Hook::None), false)?;
        modules.push(ModuleMeasure {
            path,
            is_grad: analysis::is_grad(trace)?,
            is_act: analysis::is_act(trace)?,
            acc_ac: analysis::acc(&ac.matrix)?,
            acc_joint: analysis::acc(&joint.matrix)?,
        });
    }
    Ok(SeedImportance { seed, acc_sft, modules })
}

/// Module rows (kinds) by layer columns.
fn grid(exp: &Experiment, values: &BTreeMap<ModulePath, f64>) -> String {
    let layers = exp.settings.model.layers;
    let mut s = csv_stamp(&exp.hash);
    s.push_str("module");
    for l in 0..layers {
        s.push_str(&format!(",layer{l}"));
    }
    s.push('\n');
    for kind in exp.settings.arch.kinds() {
        s.push_str(kind.name());
        for path in list_modules(exp.settings.arch, layers).iter().filter(|p| p.kind == *kind) {
            s.push_str(&format!(",{}", values[path]));
        }
        s.push('\n');
    }
    s
}

fn opt_cell(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// Scores every module by gradient and activation importance against the
/// accuracy gain of specialising it. Writes `importance.csv`,
/// `pearson.csv`, `delta_acc_grid.csv`, `ac_vs_joint_grid.csv` and
/// `summary.json`.
pub fn cmd_importance(exp: &Experiment, opts: Options) -> Result<ImportanceOutput> {
    let dir = claim(&exp.dir("importance"), opts.force)?;
    let seeds = parallel_map(&exp.settings.seeds, opts.threads, |&seed| importance_seed(exp, seed))?;
    let n = seeds.len() as f64;
    let paths = list_modules(exp.settings.arch, exp.settings.model.layers);
    let avg = |f: &dyn Fn(&SeedImportance, &ModuleMeasure) -> f64, i: usize| -> f64 {
        seeds.iter().map(|s| f(s, &s.modules[i])).sum::<f64>() / n
    };
    let mut report = Vec::new();
    let mut delta = BTreeMap::new();
    let mut gain = BTreeMap::new();
    for (i, path) in paths.iter().enumerate() {
        let d = avg(&|s, m| analysis::delta_acc(m.acc_ac, s.acc_sft), i);
        report.push(ImportanceRow {
            path: *path,
            is_grad: avg(&|_, m| m.is_grad, i),
            is_act: avg(&|_, m| m.is_act, i),
            delta_acc: d,
        });
        delta.insert(*path, d);
        gain.insert(*path, avg(&|_, m| m.acc_ac - m.acc_joint, i));
    }
    let col = |f: fn(&ImportanceRow) -> f64| report.iter().map(f).collect::<Vec<_>>();
    let d = col(|r| r.delta_acc);
    let pearson_grad = analysis::pearson(&col(|r| r.is_grad), &d).ok();
    let pearson_act = analysis::pearson(&col(|r| r.is_act), &d).ok();

    let csv = ImportanceReport {
        rows: report.clone(),
        pearson_grad: pearson_grad.unwrap_or(f64::NAN),
        pearson_act: pearson_act.unwrap_or(f64::NAN),
    }
    .to_csv();
    fs::write(dir.join("importance.csv"), format!("{}{csv}", csv_stamp(&exp.hash)))?;
    fs::write(
        dir.join("pearson.csv"),
        format!(
            "{}score,r\nis_grad,{}\nis_act,{}\n",
            csv_stamp(&exp.hash),
            opt_cell(pearson_grad),
            opt_cell(pearson_act)
        ),
    )?;
    fs::write(dir.join("delta_acc_grid.csv"), grid(exp, &delta))?;
    fs::write(dir.join("ac_vs_joint_grid.csv"), grid(exp, &gain))?;
    let summary = ImportanceSummary {
        config_hash: exp.hash.clone(),
        version: VERSION.into(),
        seeds,
        report,
        pearson_grad,
        pearson_act,
        ac_gain: gain.into_iter().collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(ImportanceOutput { dir, summary })
}
