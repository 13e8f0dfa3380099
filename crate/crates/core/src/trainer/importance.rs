//! Streaming accumulators for module importance scores.

use std::collections::BTreeMap;

use lilac_autodiff::{Gradients, ParamKey, ParamStore, Scalar};

use crate::analysis::{ModuleTrace, TaskTrace};
use crate::model::{trainable_numel, ModulePath};

/// Full per-event records kept for independent recomputation.
#[derive(Clone, Debug, Default)]
pub struct ImportanceDump {
    /// One entry per optimiser step and module: concatenated parameter gradients.
    pub grads: Vec<(u16, ModulePath, Vec<f64>)>,
    /// Parameter values at the end of each task.
    pub weights: Vec<(u16, ModulePath, Vec<f64>)>,
    /// Module outputs for every evaluation batch of the activation pass.
    pub acts: Vec<(u16, ModulePath, Vec<f64>)>,
}

#[derive(Clone, Debug, Default)]
pub struct ImportanceRecorder {
    pub traces: BTreeMap<ModulePath, ModuleTrace>,
    pub dump: Option<ImportanceDump>,
}

fn learnable<T: Scalar>(store: &ParamStore<T>) -> impl Iterator<Item = (usize, &lilac_autodiff::Parameter<T>)> {
    store.iter().enumerate().filter(|(_, p)| !p.id.starts_with("running_"))
}

impl ImportanceRecorder {
    pub fn new(dump: bool) -> Self {
        Self {
            traces: BTreeMap::new(),
            dump: dump.then(ImportanceDump::default),
        }
    }

    fn entry(&mut self, task: u16, path: ModulePath, numel: usize) -> &mut TaskTrace {
        let t = self.traces.entry(path).or_default();
        t.numel = numel;
        t.tasks.entry(task).or_default()
    }

    pub fn record_grads<T: Scalar>(&mut self, task: u16, path: ModulePath, store: &ParamStore<T>, grads: &Gradients<T>) {
        let mut sum = 0.0;
        let mut flat = Vec::new();
        for (index, p) in learnable(store) {
            let key = ParamKey { store: store.id(), index };
            match grads.get(&key) {
                Some(g) => {
                    sum += g.abs_sum_f64();
                    if self.dump.is_some() {
                        flat.extend(g.data().iter().map(|v| v.as_f64()));
                    }
                }
                None => flat.extend(std::iter::repeat_n(0.0, p.value.numel())),
            }
        }
        self.entry(task, path, trainable_numel(store)).grad_l1 += sum;
        if let Some(d) = &mut self.dump {
            d.grads.push((task, path, flat));
        }
    }

    pub fn record_weights<T: Scalar>(&mut self, task: u16, path: ModulePath, store: &ParamStore<T>) {
        let values: Vec<f64> = learnable(store)
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.as_f64()))
            .collect();
        self.entry(task, path, trainable_numel(store)).weight_l1 = values.iter().map(|v| v.abs()).sum();
        if let Some(d) = &mut self.dump {
            d.weights.push((task, path, values));
        }
    }

    pub fn record_activations<T: Scalar>(&mut self, task: u16, path: ModulePath, numel: usize, values: &[T]) {
        self.entry(task, path, numel).act_l1 += values.iter().map(|v| v.as_f64().abs()).sum::<f64>();
        if let Some(d) = &mut self.dump {
            d.acts.push((task, path, values.iter().map(|v| v.as_f64()).collect()));
        }
    }
}
