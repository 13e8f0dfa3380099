//! Task-specific copies of selected modules and routing by task id.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use lilac_autodiff::{ParamStore, Scalar, StoreId};
use serde::{Deserialize, Serialize};

use crate::error::{config, LilacError, Result};
use crate::model::{self, init, list_modules, Arch, BnUpdate, ModelConfig, ModuleKind, ModulePath, ModuleSource, StatSite, VlModel};
use crate::rng::SeedTree;

/// How a task's copies of the selected modules are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskInit {
    /// Post-initialisation values.
    CopyInit,
    /// The most recent task's values.
    CopyPrevious,
    /// Fresh random values.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionStrategy {
    pub name: String,
    pub paths: BTreeSet<ModulePath>,
    pub init: TaskInit,
}

impl SelectionStrategy {
    pub fn new(name: impl Into<String>, paths: impl IntoIterator<Item = ModulePath>) -> Self {
        Self {
            name: name.into(),
            paths: paths.into_iter().collect(),
            init: TaskInit::CopyInit,
        }
    }

    pub fn is_monolithic(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn is_expert(&self, arch: Arch, layers: usize) -> bool {
        self.paths.len() == list_modules(arch, layers).len()
    }

    pub fn validate(&self, arch: Arch, layers: usize) -> Result<()> {
        for p in &self.paths {
            ModulePath::new(p.arch, p.layer, p.kind, layers)?;
            if p.arch != arch {
                return config(format!("{p} does not belong to a {arch} model"));
            }
        }
        Ok(())
    }
}

fn select(arch: Arch, layers: usize, f: impl Fn(&ModulePath) -> bool) -> BTreeSet<ModulePath> {
    list_modules(arch, layers).into_iter().filter(f).collect()
}

/// The named strategies available for an architecture.
pub fn named_strategies(arch: Arch, layers: usize) -> BTreeMap<String, SelectionStrategy> {
    use ModuleKind::*;
    let last = layers - 1;
    let mut out = BTreeMap::new();
    let mut add = |name: String, paths: BTreeSet<ModulePath>| {
        out.insert(
            name.clone(),
            SelectionStrategy {
                name,
                paths,
                init: TaskInit::CopyInit,
            },
        );
    };
    add("monolithic".into(), BTreeSet::new());
    add("first-layer".into(), select(arch, layers, |p| p.layer == 0));
    add("last-layer".into(), select(arch, layers, |p| p.layer == last));
    for l in 0..layers {
        add(format!("layer{l}"), select(arch, layers, |p| p.layer == l));
    }
    for &kind in arch.kinds() {
        add(format!("all-{}", kind.name().replace('_', "-")), select(arch, layers, |p| p.kind == kind));
        for l in 0..layers {
            add(format!("{}@{l}", kind.name()), select(arch, layers, |p| p.kind == kind && p.layer == l));
        }
    }
    match arch {
        Arch::Transformer => {
            add("all-norms".into(), select(arch, layers, |p| matches!(p.kind, Norm1 | Norm2)));
            for l in 0..layers {
                add(format!("norms@{l}"), select(arch, layers, |p| matches!(p.kind, Norm1 | Norm2) && p.layer == l));
            }
        }
        Arch::Film => {
            add("conv-last-layer".into(), select(arch, layers, |p| matches!(p.kind, Conv1 | Conv2) && p.layer == last));
            add("bn-all".into(), select(arch, layers, |p| matches!(p.kind, Bn1 | Bn2)));
            add("mod-gamma".into(), select(arch, layers, |p| p.kind == ModGamma));
            add("mod-beta".into(), select(arch, layers, |p| p.kind == ModBeta));
        }
    }
    add("expert".into(), select(arch, layers, |_| true));
    if let Some(e) = out.get_mut("expert") {
        e.init = TaskInit::Fresh;
    }
    out
}

/// Resolves a strategy name or a comma-separated list of module paths.
pub fn resolve_strategy(arch: Arch, layers: usize, spec: &str) -> Result<SelectionStrategy> {
    if let Some(s) = named_strategies(arch, layers).remove(spec) {
        return Ok(s);
    }
    if spec.contains(':') {
        let paths = spec
            .split(',')
            .map(|p| ModulePath::parse(p, layers))
            .collect::<Result<BTreeSet<_>>>()?;
        let s = SelectionStrategy {
            name: spec.to_string(),
            paths,
            init: TaskInit::CopyInit,
        };
        s.validate(arch, layers)?;
        return Ok(s);
    }
    config(format!("unknown strategy {spec:?} for {arch}"))
}

/// Which partition of the bound parameters to freeze or unfreeze.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Shared,
    Task(u16),
}

type Tables<T> = BTreeMap<ModulePath, ParamStore<T>>;

/// Sets trainable flags on everything except running statistics.
pub fn set_trainable<T: Scalar>(store: &mut ParamStore<T>, trainable: bool) {
    for p in store.iter_mut() {
        if !p.id.starts_with("running_") {
            p.trainable = trainable;
        }
    }
}

/// Shared module tables plus one table per selected module and task.
#[derive(Clone, Debug)]
pub struct ParameterBank<T> {
    pub config: ModelConfig,
    pub strategy: SelectionStrategy,
    pub encoders: ParamStore<T>,
    pub shared: Tables<T>,
    init_snapshot: Tables<T>,
    per_task: BTreeMap<u16, Tables<T>>,
    last_task: Option<u16>,
    next_store: u32,
    seed: SeedTree,
}

impl<T: Scalar> ParameterBank<T> {
    /// Splits an initialised model; selected modules leave the shared set
    /// and are kept as the copy-init snapshot.
    pub fn new(model: VlModel<T>, strategy: SelectionStrategy, seed: SeedTree) -> Result<Self> {
        strategy.validate(model.config.arch, model.config.layers)?;
        let mut shared = model.modules;
        let mut init_snapshot = BTreeMap::new();
        for p in &strategy.paths {
            let store = shared.remove(p).ok_or_else(|| LilacError::Lookup(p.to_string()))?;
            init_snapshot.insert(*p, store);
        }
        let next_store = shared
            .values()
            .chain(init_snapshot.values())
            .map(|s| s.id().0)
            .max()
            .unwrap_or(0)
            + 1;
        Ok(Self {
            config: model.config,
            strategy,
            encoders: model.encoders,
            shared,
            init_snapshot,
            per_task: BTreeMap::new(),
            last_task: None,
            next_store,
            seed,
        })
    }

    pub fn tasks(&self) -> impl Iterator<Item = u16> + '_ {
        self.per_task.keys().copied()
    }

    pub fn has_task(&self, task: u16) -> bool {
        self.per_task.contains_key(&task)
    }

    pub fn init_snapshot(&self) -> &Tables<T> {
        &self.init_snapshot
    }

    pub fn task_tables(&self, task: u16) -> Result<&Tables<T>> {
        self.per_task
            .get(&task)
            .ok_or_else(|| LilacError::Lookup(format!("task {task} not instantiated")))
    }

    /// Tables task `task` would receive if instantiated now.
    fn fresh_tables(&self, task: u16) -> Result<Tables<T>> {
        match self.strategy.init {
            TaskInit::CopyInit => Ok(self.init_snapshot.clone()),
            TaskInit::CopyPrevious => Ok(match self.last_task {
                Some(t) => self.per_task[&t].clone(),
                None => self.init_snapshot.clone(),
            }),
            TaskInit::Fresh => {
                let seed = self.seed.child("fresh").index(u64::from(task));
                let mut out = BTreeMap::new();
                for p in &self.strategy.paths {
                    let store = init::build_store(StoreId(0), &init::module_specs(&self.config, *p), seed.child(&p.to_string()))?;
                    out.insert(*p, store);
                }
                Ok(out)
            }
        }
    }

    /// Creates task copies of the selected modules, frozen until trained.
    pub fn instantiate_task(&mut self, task: u16) -> Result<()> {
        if self.per_task.contains_key(&task) {
            return Err(LilacError::State(format!("task {task} already instantiated")));
        }
        let mut tables = self.fresh_tables(task)?;
        for store in tables.values_mut() {
            let id = StoreId(self.next_store);
            self.next_store += 1;
            *store = std::mem::replace(store, ParamStore::new(id)).with_id(id);
            set_trainable(store, false);
        }
        self.per_task.insert(task, tables);
        self.last_task = Some(task);
        Ok(())
    }

    /// Read view routing selected modules to `task`'s copies.
    pub fn bind(&self, task: u16) -> Result<BoundView<'_, T>> {
        Ok(BoundView {
            bank: self,
            tables: Cow::Borrowed(self.task_tables(task)?),
        })
    }

    /// Like [`bind`](Self::bind), but falls back to the tables a not yet
    /// instantiated task would receive. Used to evaluate future tasks.
    pub fn view(&self, task: u16) -> Result<BoundView<'_, T>> {
        match self.per_task.get(&task) {
            Some(t) => Ok(BoundView {
                bank: self,
                tables: Cow::Borrowed(t),
            }),
            None => Ok(BoundView {
                bank: self,
                tables: Cow::Owned(self.fresh_tables(task)?),
            }),
        }
    }

    pub fn freeze_set(&mut self, which: Partition, frozen: bool) -> Result<()> {
        match which {
            Partition::Shared => self.shared.values_mut().for_each(|s| set_trainable(s, !frozen)),
            Partition::Task(t) => self
                .per_task
                .get_mut(&t)
                .ok_or_else(|| LilacError::Lookup(format!("task {t} not instantiated")))?
                .values_mut()
                .for_each(|s| set_trainable(s, !frozen)),
        }
        Ok(())
    }

    /// Encoders, shared tables and `task`'s copies, for optimiser steps.
    pub fn stores_mut(&mut self, task: u16) -> Result<Vec<&mut ParamStore<T>>> {
        let tables = self
            .per_task
            .get_mut(&task)
            .ok_or_else(|| LilacError::Lookup(format!("task {task} not instantiated")))?;
        let mut v = vec![&mut self.encoders];
        v.extend(self.shared.values_mut());
        v.extend(tables.values_mut());
        Ok(v)
    }

    pub fn module_mut(&mut self, task: u16, path: ModulePath) -> Result<&mut ParamStore<T>> {
        if self.strategy.paths.contains(&path) {
            self.per_task
                .get_mut(&task)
                .and_then(|t| t.get_mut(&path))
                .ok_or_else(|| LilacError::Lookup(format!("task {task} has no copy of {path}")))
        } else {
            self.shared
                .get_mut(&path)
                .ok_or_else(|| LilacError::Lookup(format!("module {path} not shared")))
        }
    }

    /// Applies running-statistic updates produced while bound to `task`.
    pub fn apply_bn_updates(&mut self, task: u16, updates: &[BnUpdate<T>]) -> Result<()> {
        for u in updates {
            match &u.site {
                StatSite::Encoder(prefix) => model::apply_bn_update(&mut self.encoders, prefix, &u.stats)?,
                StatSite::Module(p) => model::apply_bn_update(self.module_mut(task, *p)?, "", &u.stats)?,
            }
        }
        Ok(())
    }

    pub fn shared_fingerprint(&self) -> u64 {
        model::fingerprint(self.shared.values())
    }

    pub fn task_fingerprint(&self, task: u16) -> Result<u64> {
        Ok(model::fingerprint(self.task_tables(task)?.values()))
    }

    /// Total parameter count held by the bank, encoders excluded.
    pub fn fusion_numel(&self) -> usize {
        let shared: usize = self.shared.values().map(ParamStore::numel).sum();
        let tasks: usize = self
            .per_task
            .values()
            .flat_map(|t| t.values())
            .map(ParamStore::numel)
            .sum();
        shared + tasks
    }

    /// Parameter count of one copy of the selected modules.
    pub fn selected_numel(&self) -> usize {
        self.init_snapshot.values().map(ParamStore::numel).sum()
    }
}

pub struct BoundView<'a, T: Clone> {
    bank: &'a ParameterBank<T>,
    tables: Cow<'a, Tables<T>>,
}

impl<T: Scalar> ModuleSource<T> for BoundView<'_, T> {
    fn encoders(&self) -> &ParamStore<T> {
        &self.bank.encoders
    }

    fn module(&self, path: ModulePath) -> Result<&ParamStore<T>> {
        self.tables
            .get(&path)
            .or_else(|| self.bank.shared.get(&path))
            .ok_or_else(|| LilacError::Lookup(format!("module {path} not bound")))
    }
}
