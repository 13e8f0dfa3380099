use std::collections::BTreeMap;

use lilac_autodiff::{Adam, AdamConfig, Gradients, Scalar, Tape};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::encode::{accuracy, encode_examples, instruction_codes, item_loss_sum, CodeCache, EncodedTask, Item};
use super::ewc::{FisherState, Key};
use super::importance::{ImportanceDump, ImportanceRecorder};
use super::replay::ReservoirBuffer;
use super::{init::train_init, Baseline, EpochLog, HashCheck, Hook, Phase, Schedule, TrainConfig};
use crate::analysis::{AccuracyMatrix, ModuleTrace};
use crate::data::TaskStream;
use crate::error::{config, LilacError, Result};
use crate::model::{BnUpdate, ModelConfig, ModulePath, ModuleSource, Pass, VlModel};
use crate::rng::SeedTree;
use crate::specialization::{resolve_strategy, ParameterBank, Partition};

/// An initialised model with frozen encoders and the cached encoder outputs
/// for every task of a stream. Shared by all baselines of one seed.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub model: VlModel<T>,
    pub codes: CodeCache<T>,
    pub tasks: Vec<EncodedTask<T>>,
    pub init_logs: Vec<EpochLog>,
}

pub fn prepare<T: Scalar>(
    stream: &TaskStream,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: SeedTree,
    run_id: &str,
) -> Result<Prepared<T>> {
    cfg.validate()?;
    if model_cfg.dataset != stream.dataset {
        return config("model and stream datasets differ");
    }
    let mut model = VlModel::new(model_cfg.clone(), seed.child("model"))?;
    let init_logs = train_init(&mut model, &stream.init.train, cfg, seed.child("init"), run_id)?;
    let seqs: Vec<Vec<u16>> = {
        let mut s: Vec<Vec<u16>> = stream
            .tasks
            .iter()
            .flat_map(|t| t.split.train.iter().chain(&t.split.test))
            .map(|e| e.tokens.clone())
            .collect();
        s.sort();
        s.dedup();
        s
    };
    let codes = instruction_codes(model_cfg, &model, &seqs)?;
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    for t in &stream.tasks {
        tasks.push(EncodedTask {
            task_id: t.task_id,
            train: encode_examples(model_cfg, &model, &t.split.train)?,
            test: encode_examples(model_cfg, &model, &t.split.test)?,
        });
    }
    Ok(Prepared {
        model,
        codes,
        tasks,
        init_logs,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Record importance traces (gradient, weight and activation sums).
    pub importance: bool,
    /// Additionally keep full dumps for recomputation.
    pub dump: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub matrix: AccuracyMatrix,
    pub logs: Vec<EpochLog>,
    pub hash_checks: Vec<HashCheck>,
    pub consolidations: usize,
    pub traces: Option<BTreeMap<ModulePath, ModuleTrace>>,
    pub dump: Option<ImportanceDump>,
    /// Parameter count of the final bank, encoders excluded.
    pub fusion_params: usize,
}

/// Mutable state of one continual run.
pub struct Session<'a, T: Scalar> {
    pub bank: ParameterBank<T>,
    pub logs: Vec<EpochLog>,
    pub hash_checks: Vec<HashCheck>,
    pub consolidations: usize,
    pub recorder: Option<ImportanceRecorder>,
    pub replay: Option<ReservoirBuffer<(u16, usize)>>,
    pub ewc: Option<FisherState>,
    prep: &'a Prepared<T>,
    cfg: &'a TrainConfig,
    adam: Adam<T>,
    seed: SeedTree,
    rng: ChaCha8Rng,
    run_id: String,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(
        prep: &'a Prepared<T>,
        cfg: &'a TrainConfig,
        strategy: &str,
        hook: Hook,
        ewc_lambda: f64,
        seed: SeedTree,
        run_id: &str,
    ) -> Result<Self> {
        let mcfg = &prep.model.config;
        let strategy = resolve_strategy(mcfg.arch, mcfg.layers, strategy)?;
        let bank = ParameterBank::new(prep.model.clone(), strategy, seed.child("bank"))?;
        Ok(Self {
            bank,
            logs: Vec::new(),
            hash_checks: Vec::new(),
            consolidations: 0,
            recorder: None,
            replay: (hook == Hook::Er).then(|| ReservoirBuffer::new(cfg.buffer)),
            ewc: (hook == Hook::Ewc).then(|| FisherState::new(cfg.ewc_discount, ewc_lambda)),
            prep,
            cfg,
            adam: Adam::new(AdamConfig::with_lr(cfg.lr)),
            rng: seed.child("replay").rng(),
            seed,
            run_id: run_id.to_string(),
        })
    }

    fn task_data(&self, task: u16) -> Result<&'a EncodedTask<T>> {
        self.prep
            .tasks
            .iter()
            .find(|t| t.task_id == task)
            .ok_or_else(|| LilacError::Lookup(format!("task {task} not in stream")))
    }

    fn item(&self, (task, index): (u16, usize)) -> Result<&'a Item<T>> {
        self.task_data(task)?
            .train
            .get(index)
            .ok_or_else(|| LilacError::Lookup(format!("item {index} of task {task}")))
    }

    /// One optimiser step on `fresh` items of `task`, plus replay items and
    /// the EWC penalty when `hooks` is set. Returns the batch loss.
    fn step(&mut self, task: u16, fresh: &[&'a Item<T>], hooks: bool) -> Result<f64> {
        let mut groups: BTreeMap<u16, Vec<&'a Item<T>>> = BTreeMap::new();
        groups.insert(task, fresh.to_vec());
        if hooks {
            if let Some(buf) = &self.replay {
                let k = (self.cfg.batch - fresh.len()).min(buf.len());
                let picked: Vec<(u16, usize)> = buf.sample(k, &mut self.rng)?.into_iter().copied().collect();
                for id in picked {
                    let it = self.item(id)?;
                    let route = if self.bank.strategy.is_monolithic() { task } else { id.0 };
                    groups.entry(route).or_default().push(it);
                }
            }
        }
        let n: usize = groups.values().map(Vec::len).sum();
        let mcfg = &self.prep.model.config;
        let (grads, loss, updates): (Gradients<T>, f64, Vec<BnUpdate<T>>) = {
            let mut tape = Tape::new();
            let mut pass = Pass::train();
            let mut total = None;
            for (&route, items) in &groups {
                let view = self.bank.view(route)?;
                let s = item_loss_sum(&mut tape, mcfg, &view, &self.prep.codes, items, self.cfg.temperature, &mut pass)?;
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            let total = total.expect("at least one group");
            let loss = tape.scale(total, T::from_f64_lossy(1.0 / n as f64))?;
            let grads = tape.backward(loss)?;
            (grads, tape.value(loss).item().as_f64(), pass.bn_updates)
        };
        if let Some(rec) = &mut self.recorder {
            let view = self.bank.bind(task)?;
            for path in crate::model::list_modules(mcfg.arch, mcfg.layers) {
                rec.record_grads(task, path, view.module(path)?, &grads);
            }
        }
        for s in self.bank.stores_mut(task)? {
            s.accumulate(&grads)?;
        }
        let mut penalty = 0.0;
        if hooks {
            if let Some(ewc) = &self.ewc {
                if ewc.is_active() {
                    penalty = ewc.add_penalty_grad(&mut self.bank.shared)?;
                }
            }
        }
        let mut stores = self.bank.stores_mut(task)?;
        self.adam.step(&mut stores);
        self.bank.apply_bn_updates(task, &updates)?;
        Ok(loss + penalty)
    }

    /// One pass over the task's training set.
    fn epoch(&mut self, task: u16, epoch: usize, phase: Phase, hooks: bool) -> Result<()> {
        let data = self.task_data(task)?;
        let replaying = hooks && self.replay.as_ref().is_some_and(|b| !b.is_empty());
        let fresh = if replaying { self.cfg.batch.div_ceil(2) } else { self.cfg.batch };
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let key = format!("{task}/{epoch}/{phase:?}");
        order.shuffle(&mut self.seed.child("shuffle").child(&key).rng());
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(fresh) {
            let items: Vec<&Item<T>> = chunk.iter().map(|&i| &data.train[i]).collect();
            total += self.step(task, &items, hooks)?;
            steps += 1;
        }
        self.logs.push(EpochLog {
            run_id: self.run_id.clone(),
            task,
            epoch,
            phase,
            loss: total / steps.max(1) as f64,
            lr: self.cfg.lr,
        });
        Ok(())
    }

    fn checked_epoch(&mut self, task: u16, epoch: usize, phase: Phase, hooks: bool) -> Result<()> {
        let shared_before = self.bank.shared_fingerprint();
        let task_before = self.bank.task_fingerprint(task)?;
        self.epoch(task, epoch, phase, hooks)?;
        let check = HashCheck {
            task,
            epoch,
            phase,
            shared_before,
            shared_after: self.bank.shared_fingerprint(),
            task_before,
            task_after: self.bank.task_fingerprint(task)?,
        };
        let ok = check.holds();
        self.hash_checks.push(check);
        if !ok {
            return Err(LilacError::Invariant(format!(
                "{phase:?} epoch {epoch} of task {task} mutated the frozen partition"
            )));
        }
        Ok(())
    }

    /// Adaptation epochs on the selected modules with a consolidation epoch
    /// on the shared modules after every `adapt_freq`-th one.
    pub fn train_ac(&mut self, task: u16) -> Result<()> {
        let mcfg = &self.prep.model.config;
        if self.bank.strategy.is_monolithic() || self.bank.strategy.is_expert(mcfg.arch, mcfg.layers) {
            return config("adaptation and consolidation needs a proper non-empty module subset");
        }
        self.bank.freeze_set(Partition::Shared, true)?;
        self.bank.freeze_set(Partition::Task(task), false)?;
        for e in 1..=self.cfg.adapt_epochs {
            self.checked_epoch(task, e, Phase::Adapt, false)?;
            if e % self.cfg.adapt_freq == 0 {
                self.bank.freeze_set(Partition::Task(task), true)?;
                self.bank.freeze_set(Partition::Shared, false)?;
                self.checked_epoch(task, e, Phase::Consolidate, true)?;
                self.consolidations += 1;
                self.bank.freeze_set(Partition::Shared, true)?;
                self.bank.freeze_set(Partition::Task(task), false)?;
            }
        }
        self.bank.freeze_set(Partition::Shared, false)?;
        Ok(())
    }

    pub fn train_joint(&mut self, task: u16, epochs: usize) -> Result<()> {
        self.bank.freeze_set(Partition::Shared, false)?;
        self.bank.freeze_set(Partition::Task(task), false)?;
        for e in 1..=epochs {
            self.epoch(task, e, Phase::Joint, true)?;
        }
        Ok(())
    }

    /// Squared-gradient Fisher diagonal of the shared parameters, averaged
    /// over the task's training batches.
    fn task_fisher(&mut self, task: u16) -> Result<BTreeMap<Key, Vec<f64>>> {
        let data = self.task_data(task)?;
        let mcfg = &self.prep.model.config;
        self.bank.freeze_set(Partition::Shared, false)?;
        let mut acc: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
        let mut batches = 0usize;
        for chunk in data.train.chunks(self.cfg.batch) {
            let items: Vec<&Item<T>> = chunk.iter().collect();
            let view = self.bank.bind(task)?;
            let mut tape = Tape::new();
            let mut pass = Pass::eval();
            let s = item_loss_sum(&mut tape, mcfg, &view, &self.prep.codes, &items, self.cfg.temperature, &mut pass)?;
            let loss = tape.scale(s, T::from_f64_lossy(1.0 / items.len() as f64))?;
            let grads = tape.backward(loss)?;
            for (path, store) in &self.bank.shared {
                for (index, p) in store.iter().enumerate().filter(|(_, p)| !p.id.starts_with("running_")) {
                    let key = lilac_autodiff::ParamKey { store: store.id(), index };
                    let f = acc.entry((*path, p.id.clone())).or_insert_with(|| vec![0.0; p.value.numel()]);
                    if let Some(g) = grads.get(&key) {
                        for (a, g) in f.iter_mut().zip(g.data()) {
                            let g = g.as_f64();
                            *a += g * g;
                        }
                    }
                }
            }
            batches += 1;
        }
        for f in acc.values_mut() {
            f.iter_mut().for_each(|v| *v /= batches.max(1) as f64);
        }
        Ok(acc)
    }

    fn record_importance(&mut self, task: u16) -> Result<()> {
        let Some(mut rec) = self.recorder.take() else {
            return Ok(());
        };
        let mcfg = &self.prep.model.config;
        let paths = crate::model::list_modules(mcfg.arch, mcfg.layers);
        let view = self.bank.bind(task)?;
        for &p in &paths {
            rec.record_weights(task, p, view.module(p)?);
        }
        let data = self.task_data(task)?;
        for chunk in data.train.chunks(super::encode::EVAL_BATCH) {
            let items: Vec<&Item<T>> = chunk.iter().collect();
            let mut tape = Tape::new();
            let mut pass = Pass::eval();
            super::encode::premise_embed(&mut tape, mcfg, &view, &self.prep.codes, &items, &mut pass)?;
            for (p, v) in &pass.activations {
                let numel = crate::model::trainable_numel(view.module(*p)?);
                rec.record_activations(task, *p, numel, tape.value(*v).data());
            }
        }
        self.recorder = Some(rec);
        Ok(())
    }

    /// Bookkeeping once a task's training is over.
    pub fn finish_task(&mut self, task: u16) -> Result<()> {
        self.bank.freeze_set(Partition::Task(task), true)?;
        if self.ewc.is_some() {
            let f = self.task_fisher(task)?;
            if let Some(ewc) = &mut self.ewc {
                ewc.update(f, &self.bank.shared)?;
            }
        }
        if let Some(buf) = &mut self.replay {
            let n = self.prep.tasks.iter().find(|t| t.task_id == task).map_or(0, |t| t.train.len());
            for i in 0..n {
                buf.insert((task, i), &mut self.rng);
            }
        }
        self.record_importance(task)
    }

    /// Test accuracy of every task under its current (or prospective) binding.
    pub fn evaluate_all(&self) -> Result<Vec<f64>> {
        let mcfg = &self.prep.model.config;
        self.prep
            .tasks
            .iter()
            .map(|t| accuracy(mcfg, &self.bank.view(t.task_id)?, &self.prep.codes, &t.test))
            .collect()
    }

    /// Multi-task training on the union of all training sets.
    fn train_union(&mut self, epochs: usize) -> Result<()> {
        let all: Vec<(u16, usize)> = self
            .prep
            .tasks
            .iter()
            .flat_map(|t| (0..t.train.len()).map(move |i| (t.task_id, i)))
            .collect();
        let anchor = self.prep.tasks[0].task_id;
        self.bank.freeze_set(Partition::Shared, false)?;
        for e in 1..=epochs {
            let mut order = all.clone();
            order.shuffle(&mut self.seed.child("shuffle").child("union").index(e as u64).rng());
            let (mut total, mut steps) = (0.0, 0usize);
            for chunk in order.chunks(self.cfg.batch) {
                let items = chunk.iter().map(|&id| self.item(id)).collect::<Result<Vec<_>>>()?;
                total += self.step(anchor, &items, false)?;
                steps += 1;
            }
            self.logs.push(EpochLog {
                run_id: self.run_id.clone(),
                task: 0,
                epoch: e,
                phase: Phase::Joint,
                loss: total / steps.max(1) as f64,
                lr: self.cfg.lr,
            });
        }
        Ok(())
    }
}

/// Runs one baseline over the prepared stream and fills the accuracy matrix.
pub fn run_baseline<T: Scalar>(
    prep: &Prepared<T>,
    baseline: &Baseline,
    cfg: &TrainConfig,
    seed: SeedTree,
    run_id: &str,
    opts: RunOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    let seed = seed.child(&baseline.to_string());
    let t = prep.tasks.len();
    let mut matrix = AccuracyMatrix::new(t);
    let mut session = match baseline {
        Baseline::Mtl => Session::new(prep, cfg, "monolithic", Hook::None, 0.0, seed, run_id)?,
        Baseline::Continual { strategy, schedule, hook } => {
            let lambda = match schedule {
                Schedule::Ac => cfg.ewc_lambda_ac,
                Schedule::Joint => cfg.ewc_lambda_joint,
            };
            Session::new(prep, cfg, strategy, *hook, lambda, seed, run_id)?
        }
    };
    if opts.importance {
        session.recorder = Some(ImportanceRecorder::new(opts.dump));
    }
    matrix.push_row(session.evaluate_all()?)?;
    match baseline {
        Baseline::Mtl => {
            for task in prep.tasks.iter().map(|t| t.task_id) {
                session.bank.instantiate_task(task)?;
            }
            session.train_union(cfg.joint_epochs())?;
            matrix.push_row(session.evaluate_all()?)?;
        }
        Baseline::Continual { schedule, .. } => {
            for task in prep.tasks.iter().map(|t| t.task_id) {
                session.bank.instantiate_task(task)?;
                match schedule {
                    Schedule::Ac => session.train_ac(task)?,
                    Schedule::Joint => session.train_joint(task, cfg.joint_epochs())?,
                }
                session.finish_task(task)?;
                matrix.push_row(session.evaluate_all()?)?;
            }
        }
    }
    let (traces, dump) = match session.recorder.take() {
        Some(r) => (Some(r.traces), r.dump),
        None => (None, None),
    };
    Ok(RunOutput {
        matrix,
        logs: session.logs,
        hash_checks: session.hash_checks,
        consolidations: session.consolidations,
        traces,
        dump,
        fusion_params: session.bank.fusion_numel(),
    })
}
