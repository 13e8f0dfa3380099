//! Continual-learning metrics and module importance scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LilacError, Result};
use crate::model::ModulePath;

/// `rows[0]` holds post-initialisation accuracies, `rows[i]` accuracies
/// after training task `i`. Multi-task runs have a single trained row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub tasks: usize,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self { tasks, rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.tasks {
            return Err(LilacError::Invariant(format!("row of {} entries for {} tasks", row.len(), self.tasks)));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(LilacError::Invariant("accuracy outside [0, 1]".into()));
        }
        if self.rows.len() > self.tasks {
            return Err(LilacError::Invariant("matrix already complete".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    /// `A_{i,j}` with `i = 0` the initialisation row and `j` 1-based.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j - 1]
    }

    pub fn is_sequential(&self) -> bool {
        self.rows.len() == self.tasks + 1
    }

    fn require_sequential(&self) -> Result<()> {
        if !self.is_sequential() {
            return Err(LilacError::State(format!(
                "metric needs {} rows, matrix has {}",
                self.tasks + 1,
                self.rows.len()
            )));
        }
        Ok(())
    }
}

/// Mean final accuracy over all tasks.
pub fn acc(a: &AccuracyMatrix) -> Result<f64> {
    let last = a
        .rows
        .iter()
        .skip(1)
        .last()
        .ok_or_else(|| LilacError::State("no trained row".into()))?;
    Ok(last.iter().sum::<f64>() / a.tasks as f64)
}

/// Catastrophic forgetting, normalised by the task count.
pub fn cf(a: &AccuracyMatrix) -> Result<f64> {
    a.require_sequential()?;
    let t = a.tasks;
    Ok((1..t).map(|j| a.get(j, j) - a.get(t, j)).sum::<f64>() / t as f64)
}

/// Forward transfer against the post-initialisation accuracies.
pub fn ft(a: &AccuracyMatrix) -> Result<f64> {
    a.require_sequential()?;
    let t = a.tasks;
    if t < 2 {
        return Err(LilacError::State("forward transfer needs two tasks".into()));
    }
    Ok((2..=t).map(|j| a.get(j - 1, j) - a.get(0, j)).sum::<f64>() / (t - 1) as f64)
}

pub fn delta_acc(specialized: f64, monolithic: f64) -> f64 {
    specialized - monolithic
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(LilacError::Config("pearson needs two equal-length sequences of at least 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(LilacError::Invariant("pearson undefined for zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Standard error of the mean, `sd / sqrt(n)` with the sample deviation.
pub fn stderr(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Per-task sums for one module.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    /// `Σ_w |w|` with the parameters at the end of the task.
    pub weight_l1: f64,
    /// `Σ_batches Σ_w |∂L/∂w|`.
    pub grad_l1: f64,
    /// `Σ_examples ‖activation‖₁` from an evaluation pass with the final parameters.
    pub act_l1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleTrace {
    /// Parameter count `|θ^m|`.
    pub numel: usize,
    pub tasks: BTreeMap<u16, TaskTrace>,
}

fn alpha(trace: &ModuleTrace) -> Result<f64> {
    if trace.numel <= 1 {
        return Err(LilacError::Invariant(format!(
            "importance normaliser undefined for {} parameters",
            trace.numel
        )));
    }
    if trace.tasks.is_empty() {
        return Err(LilacError::State("empty importance trace".into()));
    }
    Ok(1.0 / (trace.tasks.len() as f64 * (trace.numel as f64).ln()))
}

pub fn is_grad(trace: &ModuleTrace) -> Result<f64> {
    let a = alpha(trace)?;
    Ok(a * trace.tasks.values().map(|t| t.weight_l1 + 0.5 * t.grad_l1).sum::<f64>())
}

pub fn is_act(trace: &ModuleTrace) -> Result<f64> {
    let a = alpha(trace)?;
    Ok(a * trace.tasks.values().map(|t| t.act_l1).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub path: ModulePath,
    pub is_grad: f64,
    pub is_act: f64,
    pub delta_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub rows: Vec<ImportanceRow>,
    pub pearson_grad: f64,
    pub pearson_act: f64,
}

impl ImportanceReport {
    pub fn build(
        traces: &BTreeMap<ModulePath, ModuleTrace>,
        delta: &BTreeMap<ModulePath, f64>,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        for (path, trace) in traces {
            let d = *delta
                .get(path)
                .ok_or_else(|| LilacError::Lookup(format!("no accuracy gain for {path}")))?;
            rows.push(ImportanceRow {
                path: *path,
                is_grad: is_grad(trace)?,
                is_act: is_act(trace)?,
                delta_acc: d,
            });
        }
        let col = |f: fn(&ImportanceRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let d = col(|r| r.delta_acc);
        Ok(Self {
            pearson_grad: pearson(&col(|r| r.is_grad), &d)?,
            pearson_act: pearson(&col(|r| r.is_act), &d)?,
            rows,
        })
    }

    pub const CSV_HEADER: &'static str = "module,layer,kind,is_grad,is_act,delta_acc";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.path,
                r.path.layer,
                r.path.kind.name(),
                r.is_grad,
                r.is_act,
                r.delta_acc
            ));
        }
        s
    }
}
