//! Frozen-encoder caches and the contrastive objective.

use std::collections::BTreeMap;

use lilac_autodiff::{cosine, Scalar, Tape, Tensor, Var};

use crate::data::{Example, Raster};
use crate::error::{config, Result};
use crate::model::{self, Arch, Language, ModelConfig, ModuleSource, Pass};

/// Stabiliser for cosine similarity of near-zero embeddings.
pub const COS_EPS: f64 = 1e-8;
const ENCODE_CHUNK: usize = 64;

/// An example with everything the frozen encoders contribute precomputed.
#[derive(Clone, Debug)]
pub struct Item<T> {
    pub task: u16,
    pub instruction: u16,
    pub tokens: Vec<u16>,
    /// `h(o)`, shape `[C, gh, gw]`.
    pub features: Tensor<T>,
    /// `d(h(o⁺))` and `d(h(o⁻))`.
    pub positive: Vec<T>,
    pub negative: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct EncodedTask<T> {
    pub task_id: u16,
    pub train: Vec<Item<T>>,
    pub test: Vec<Item<T>>,
}

/// Instruction codes of the FiLM language encoder, keyed by token sequence.
pub type CodeCache<T> = BTreeMap<Vec<u16>, Vec<T>>;

pub fn instruction_codes<T: Scalar>(
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    sequences: &[Vec<u16>],
) -> Result<CodeCache<T>> {
    let mut out = BTreeMap::new();
    if cfg.arch != Arch::Film {
        return Ok(out);
    }
    for chunk in sequences.chunks(ENCODE_CHUNK) {
        let mut tape = Tape::new();
        let toks: Vec<&[u16]> = chunk.iter().map(Vec::as_slice).collect();
        let lang = model::language(&mut tape, cfg, src, &toks)?;
        let v = tape.value(lang.var);
        for (i, seq) in chunk.iter().enumerate() {
            out.insert(seq.clone(), v.row(i).to_vec());
        }
    }
    Ok(out)
}

pub fn encode_examples<T: Scalar>(
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    examples: &[Example],
) -> Result<Vec<Item<T>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(ENCODE_CHUNK) {
        let n = chunk.len();
        let mut images: Vec<&Raster> = chunk.iter().map(|e| &e.premise).collect();
        images.extend(chunk.iter().map(|e| &e.positive));
        images.extend(chunk.iter().map(|e| &e.negative));
        let mut tape = Tape::new();
        let mut pass = Pass::eval();
        let x = tape.constant(model::image_batch(&images)?);
        let feats = model::vision(&mut tape, src, x, &mut pass)?;
        let hyp_feats = tape.narrow(feats, 0, n, 2 * n)?;
        let hyp = model::hypothesis(&mut tape, cfg, src, hyp_feats)?;
        let f = tape.value(feats);
        let h = tape.value(hyp);
        let fshape = f.shape()[1..].to_vec();
        for (i, e) in chunk.iter().enumerate() {
            out.push(Item {
                task: e.task_id,
                instruction: e.instruction_id,
                tokens: e.tokens.clone(),
                features: Tensor::new(fshape.clone(), f.row(i).to_vec())?,
                positive: h.row(i).to_vec(),
                negative: h.row(n + i).to_vec(),
            });
        }
    }
    Ok(out)
}

fn stack_rows<T: Scalar>(rows: &[&[T]], tail: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * rows.first().map_or(0, |r| r.len()));
    for r in rows {
        data.extend_from_slice(r);
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(tail);
    Ok(Tensor::new(shape, data)?)
}

/// Language input for a batch: cached FiLM codes or transformer word embeddings.
pub fn batch_language<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    codes: &CodeCache<T>,
    items: &[&Item<T>],
) -> Result<Language> {
    match cfg.arch {
        Arch::Film => {
            let mut rows = Vec::with_capacity(items.len());
            for it in items {
                match codes.get(&it.tokens) {
                    Some(c) => rows.push(c.as_slice()),
                    None => return config("instruction missing from the code cache"),
                }
            }
            let var = tape.constant(stack_rows(&rows, &[cfg.instr_dim])?);
            Ok(Language {
                var,
                words: 0,
                mask: Vec::new(),
            })
        }
        Arch::Transformer => {
            let toks: Vec<&[u16]> = items.iter().map(|i| i.tokens.as_slice()).collect();
            model::language(tape, cfg, src, &toks)
        }
    }
}

/// Premise embeddings `[N, P]` for cached items.
pub fn premise_embed<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    codes: &CodeCache<T>,
    items: &[&Item<T>],
    pass: &mut Pass<T>,
) -> Result<Var> {
    let rows: Vec<&[T]> = items.iter().map(|i| i.features.data()).collect();
    let feats = tape.constant(stack_rows(&rows, items[0].features.shape())?);
    let lang = batch_language(tape, cfg, src, codes, items)?;
    let pooled = model::fuse(tape, cfg, src, feats, &lang, pass)?;
    model::decode(tape, src, pooled)
}

/// Per-item InfoNCE terms `softplus((s⁻ − s⁺) / τ)`, shape `[N]`.
pub fn infonce_terms<T: Scalar>(tape: &mut Tape<T>, anchor: Var, pos: Var, neg: Var, temperature: f64) -> Result<Var> {
    let eps = T::from_f64_lossy(COS_EPS);
    let sp = tape.row_cosine(anchor, pos, eps)?;
    let sn = tape.row_cosine(anchor, neg, eps)?;
    let d = tape.sub(sn, sp)?;
    let d = tape.scale(d, T::from_f64_lossy(1.0 / temperature))?;
    Ok(tape.softplus(d)?)
}

/// Batch-mean InfoNCE loss with one positive and one negative per anchor.
pub fn infonce_loss<T: Scalar>(tape: &mut Tape<T>, anchor: Var, pos: Var, neg: Var, temperature: f64) -> Result<Var> {
    let terms = infonce_terms(tape, anchor, pos, neg, temperature)?;
    Ok(tape.mean(terms)?)
}

/// Summed loss terms for cached items under one binding.
pub fn item_loss_sum<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    codes: &CodeCache<T>,
    items: &[&Item<T>],
    temperature: f64,
    pass: &mut Pass<T>,
) -> Result<Var> {
    let anchor = premise_embed(tape, cfg, src, codes, items, pass)?;
    let p = cfg.proj_dim;
    let pos: Vec<&[T]> = items.iter().map(|i| i.positive.as_slice()).collect();
    let neg: Vec<&[T]> = items.iter().map(|i| i.negative.as_slice()).collect();
    let pos = tape.constant(stack_rows(&pos, &[p])?);
    let neg = tape.constant(stack_rows(&neg, &[p])?);
    let terms = infonce_terms(tape, anchor, pos, neg, temperature)?;
    Ok(tape.sum(terms)?)
}

/// Correct iff the anchor is strictly closer to the positive; ties are wrong.
pub fn predict<T: Scalar>(anchor: &[T], positive: &[T], negative: &[T]) -> bool {
    let eps = T::from_f64_lossy(COS_EPS);
    cosine(anchor, positive, eps) > cosine(anchor, negative, eps)
}

pub const EVAL_BATCH: usize = 128;

/// Fraction of items predicted correctly under `src`.
pub fn accuracy<T: Scalar>(
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    codes: &CodeCache<T>,
    items: &[Item<T>],
) -> Result<f64> {
    if items.is_empty() {
        return config("accuracy over an empty set");
    }
    let mut correct = 0usize;
    for chunk in items.chunks(EVAL_BATCH) {
        let refs: Vec<&Item<T>> = chunk.iter().collect();
        let mut tape = Tape::new();
        let mut pass = Pass::eval();
        let a = premise_embed(&mut tape, cfg, src, codes, &refs, &mut pass)?;
        let a = tape.value(a);
        for (i, it) in chunk.iter().enumerate() {
            correct += predict(a.row(i), &it.positive, &it.negative) as usize;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}
