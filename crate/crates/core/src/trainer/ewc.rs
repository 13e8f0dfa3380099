//! Online elastic weight consolidation over a set of named tables.

use std::collections::BTreeMap;

use lilac_autodiff::{ParamStore, Scalar, Tensor};

use crate::error::{LilacError, Result};
use crate::model::ModulePath;

pub type Key = (ModulePath, String);

#[derive(Clone, Debug)]
pub struct FisherState {
    pub discount: f64,
    pub lambda: f64,
    pub fisher: BTreeMap<Key, Vec<f64>>,
    pub anchor: BTreeMap<Key, Vec<f64>>,
}

fn entries<'a, T: Scalar>(
    tables: &'a BTreeMap<ModulePath, ParamStore<T>>,
) -> impl Iterator<Item = (Key, &'a lilac_autodiff::Parameter<T>)> {
    tables.iter().flat_map(|(path, s)| {
        s.iter()
            .filter(|p| !p.id.starts_with("running_"))
            .map(move |p| ((*path, p.id.clone()), p))
    })
}

impl FisherState {
    pub fn new(discount: f64, lambda: f64) -> Self {
        Self {
            discount,
            lambda,
            fisher: BTreeMap::new(),
            anchor: BTreeMap::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        !self.anchor.is_empty()
    }

    /// `F ← discount·F + F_task`; the anchor moves to `tables`.
    pub fn update<T: Scalar>(
        &mut self,
        task_fisher: BTreeMap<Key, Vec<f64>>,
        tables: &BTreeMap<ModulePath, ParamStore<T>>,
    ) -> Result<()> {
        for (key, f_task) in task_fisher {
            if f_task.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(LilacError::Invariant(format!("invalid Fisher entry for {key:?}")));
            }
            let f = self.fisher.entry(key).or_insert_with(|| vec![0.0; f_task.len()]);
            if f.len() != f_task.len() {
                return Err(LilacError::Invariant("Fisher shape changed".into()));
            }
            for (a, b) in f.iter_mut().zip(&f_task) {
                *a = self.discount * *a + b;
            }
        }
        self.anchor = entries(tables)
            .map(|(k, p)| (k, p.value.data().iter().map(|v| v.as_f64()).collect()))
            .collect();
        Ok(())
    }

    /// `(λ/2)·Σ F_i (w_i − w*_i)²`.
    pub fn penalty<T: Scalar>(&self, tables: &BTreeMap<ModulePath, ParamStore<T>>) -> f64 {
        let mut total = 0.0;
        for (k, p) in entries(tables) {
            if let (Some(f), Some(a)) = (self.fisher.get(&k), self.anchor.get(&k)) {
                for ((w, f), a) in p.value.data().iter().zip(f).zip(a) {
                    let d = w.as_f64() - a;
                    total += f * d * d;
                }
            }
        }
        0.5 * self.lambda * total
    }

    /// Adds `λ·F·(w − w*)` to the gradients of trainable parameters and
    /// returns the penalty value.
    pub fn add_penalty_grad<T: Scalar>(&self, tables: &mut BTreeMap<ModulePath, ParamStore<T>>) -> Result<f64> {
        let value = self.penalty(tables);
        for (path, store) in tables.iter_mut() {
            for p in store.iter_mut().filter(|p| p.trainable) {
                let k = (*path, p.id.clone());
                let (Some(f), Some(a)) = (self.fisher.get(&k), self.anchor.get(&k)) else {
                    continue;
                };
                let g: Vec<f64> = p
                    .value
                    .data()
                    .iter()
                    .zip(f)
                    .zip(a)
                    .map(|((w, f), a)| self.lambda * f * (w.as_f64() - a))
                    .collect();
                p.accumulate_grad(&Tensor::from_f64(p.value.shape().to_vec(), &g)?)?;
            }
        }
        Ok(value)
    }

    pub fn numel(&self) -> usize {
        self.fisher.values().map(Vec::len).sum::<usize>() + self.anchor.values().map(Vec::len).sum::<usize>()
    }
}
