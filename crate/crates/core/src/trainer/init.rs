use lilac_autodiff::{Adam, AdamConfig, Scalar, Tape};
use rand::seq::SliceRandom;

use super::encode::infonce_loss;
use super::{EpochLog, Phase, TrainConfig};
use crate::data::{Example, Raster};
use crate::error::{config, Result};
use crate::model::{self, Pass, VlModel};
use crate::rng::SeedTree;

/// Trains every parameter on the initialisation split, then freezes the
/// encoders and decoder.
pub fn train_init<T: Scalar>(
    model: &mut VlModel<T>,
    examples: &[Example],
    cfg: &TrainConfig,
    seed: SeedTree,
    run_id: &str,
) -> Result<Vec<EpochLog>> {
    if examples.is_empty() {
        return config("empty initialisation set");
    }
    let mcfg = model.config.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.init_lr));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut logs = Vec::new();
    for epoch in 1..=cfg.init_epochs {
        order.shuffle(&mut seed.child("shuffle").index(epoch as u64).rng());
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let n = batch.len();
            let mut images: Vec<&Raster> = batch.iter().map(|e| &e.premise).collect();
            images.extend(batch.iter().map(|e| &e.positive));
            images.extend(batch.iter().map(|e| &e.negative));
            let toks: Vec<&[u16]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
            let mut tape = Tape::new();
            let mut pass = Pass::train();
            let x = tape.constant(model::image_batch(&images)?);
            let feats = model::vision(&mut tape, &*model, x, &mut pass)?;
            let premise = tape.narrow(feats, 0, 0, n)?;
            let pos = tape.narrow(feats, 0, n, n)?;
            let neg = tape.narrow(feats, 0, 2 * n, n)?;
            let lang = model::language(&mut tape, &mcfg, &*model, &toks)?;
            let pooled = model::fuse(&mut tape, &mcfg, &*model, premise, &lang, &mut pass)?;
            let anchor = model::decode(&mut tape, &*model, pooled)?;
            let pos = model::hypothesis(&mut tape, &mcfg, &*model, pos)?;
            let neg = model::hypothesis(&mut tape, &mcfg, &*model, neg)?;
            let loss = infonce_loss(&mut tape, anchor, pos, neg, cfg.temperature)?;
            let grads = tape.backward(loss)?;
            total += tape.value(loss).item().as_f64() * n as f64;
            count += n;
            let mut stores = model.stores_mut();
            for s in stores.iter_mut() {
                s.accumulate(&grads)?;
            }
            adam.step(&mut stores);
            model.apply_bn_updates(&pass.bn_updates)?;
        }
        logs.push(EpochLog {
            run_id: run_id.to_string(),
            task: 0,
            epoch,
            phase: Phase::Init,
            loss: total / count.max(1) as f64,
            lr: cfg.init_lr,
        });
    }
    model.freeze_encoders();
    Ok(logs)
}
