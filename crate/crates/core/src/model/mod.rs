//! Vision-language models: frozen encoders `g`, `h`, decoder `d`, and the
//! FiLM or transformer fusion network `f` built from named modules.

pub mod checkpoint;
#[cfg(feature = "numcheck")]
pub mod gradcheck;
pub mod init;
pub mod path;

use std::collections::BTreeMap;

use lilac_autodiff::nn::{self, AttentionVars, GruVars, LinearVars};
use lilac_autodiff::{BatchStats, BnMode, ParamStore, PoolMode, Scalar, StoreId, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::instruction::{max_tokens, vocabulary};
use crate::data::{Dataset, Raster};
use crate::error::{config, LilacError, Result};
use crate::rng::SeedTree;
pub use path::{list_modules, Arch, ModuleKind, ModulePath};

/// RGB plus two coordinate planes.
pub const VISION_INPUT_CHANNELS: usize = 5;
pub const NORM_EPS: f64 = lilac_autodiff::NORM_EPS;
pub const BN_MOMENTUM: f64 = lilac_autodiff::BN_MOMENTUM;
pub const ENCODER_STORE: StoreId = StoreId(0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub dataset: Dataset,
    pub layers: usize,
    pub vision_channels: [usize; 3],
    /// Decoder output width.
    pub proj_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub word_dim: usize,
    pub instr_dim: usize,
}

impl ModelConfig {
    pub fn desk(arch: Arch, dataset: Dataset) -> Self {
        Self {
            arch,
            dataset,
            layers: 4,
            vision_channels: [16, 32, 32],
            proj_dim: 128,
            d_model: 96,
            heads: 2,
            ffn_dim: 64,
            word_dim: 128,
            instr_dim: 256,
        }
    }

    pub fn paper(arch: Arch, dataset: Dataset) -> Self {
        Self {
            d_model: 256,
            ..Self::desk(arch, dataset)
        }
    }

    /// Small widths for fast tests and toy streams.
    pub fn tiny(arch: Arch, dataset: Dataset) -> Self {
        Self {
            arch,
            dataset,
            layers: 4,
            vision_channels: [4, 8, 8],
            proj_dim: 16,
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
            word_dim: 8,
            instr_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return config("model needs at least one fusion layer");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        let dims = [self.proj_dim, self.d_model, self.ffn_dim, self.word_dim, self.instr_dim];
        if dims.contains(&0) || self.vision_channels.contains(&0) {
            return config("model dimensions must be positive");
        }
        Ok(())
    }

    pub fn image(&self) -> (usize, usize) {
        self.dataset.image_size()
    }

    /// Spatial size of the vision encoder output.
    pub fn grid(&self) -> (usize, usize) {
        let down = |s: usize| (0..3).fold(s, |s, _| (s - 1) / 2 + 1);
        let (h, w) = self.image();
        (down(h), down(w))
    }

    pub fn grid_cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn channels(&self) -> usize {
        self.vision_channels[2]
    }

    /// Vocabulary size including the padding token.
    pub fn vocab(&self) -> usize {
        vocabulary(self.dataset).len() + 1
    }

    pub fn pad(&self) -> usize {
        self.vocab() - 1
    }

    pub fn max_words(&self) -> usize {
        max_tokens(self.dataset)
    }

    /// Width of the pooled fusion output that feeds the decoder.
    pub fn fused_width(&self) -> usize {
        match self.arch {
            Arch::Film => self.channels(),
            Arch::Transformer => self.d_model,
        }
    }
}

/// Read access to parameter tables during a forward pass.
pub trait ModuleSource<T: Scalar> {
    fn encoders(&self) -> &ParamStore<T>;
    fn module(&self, path: ModulePath) -> Result<&ParamStore<T>>;
}

/// Where a batch-norm layer keeps its running statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StatSite {
    Encoder(String),
    Module(ModulePath),
}

#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub site: StatSite,
    pub stats: BatchStats<T>,
}

/// Per-forward bookkeeping: whether trainable batch-norm layers use batch
/// statistics, the statistics they produced, and recorded module outputs.
#[derive(Debug)]
pub struct Pass<T> {
    pub training: bool,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub activations: Vec<(ModulePath, Var)>,
}

impl<T> Pass<T> {
    pub fn train() -> Self {
        Self {
            training: true,
            bn_updates: Vec::new(),
            activations: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            ..Self::train()
        }
    }
}

fn param<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    tape.param_from(store, name)
        .map_err(|_| LilacError::State(format!("parameter {name:?} missing from table {:?}", store.id())))
}

fn linear_vars<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str) -> Result<LinearVars> {
    Ok(LinearVars {
        weight: param(tape, store, &format!("{prefix}weight"))?,
        bias: param(tape, store, &format!("{prefix}bias"))?,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

fn norm_vars<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str) -> Result<NormVars> {
    Ok(NormVars {
        gamma: param(tape, store, &format!("{prefix}gamma"))?,
        beta: param(tape, store, &format!("{prefix}beta"))?,
    })
}

/// Batch-norm mode for a stored layer: batch statistics while its own
/// parameters are being trained, running statistics otherwise.
pub fn bn_mode<T: Scalar>(store: &ParamStore<T>, prefix: &str, training: bool) -> Result<BnMode<T>> {
    let gamma = store
        .get(&format!("{prefix}gamma"))
        .ok_or_else(|| LilacError::State(format!("batch norm {prefix:?} missing")))?;
    if training && gamma.trainable {
        return Ok(BnMode::Train);
    }
    let mean = store.get(&format!("{prefix}running_mean"));
    let var = store.get(&format!("{prefix}running_var"));
    match (mean, var) {
        (Some(m), Some(v)) => Ok(BnMode::Eval {
            mean: m.value.data().to_vec(),
            var: v.value.data().to_vec(),
        }),
        _ => Err(LilacError::State(format!("running statistics for {prefix:?} missing"))),
    }
}

/// Exponential moving average of batch statistics into a table.
pub fn apply_bn_update<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, stats: &BatchStats<T>) -> Result<()> {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    for (name, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
        let p = store
            .get_mut(&format!("{prefix}{name}"))
            .ok_or_else(|| LilacError::State(format!("{prefix}{name} missing")))?;
        for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct FilmLayerVars {
    pub conv1: Var,
    pub bn1: NormVars,
    pub conv2: Var,
    pub mod_gamma: LinearVars,
    pub mod_beta: LinearVars,
    pub bn2: NormVars,
}

pub struct LayerOutput<T> {
    pub output: Var,
    pub activations: Vec<(ModuleKind, Var)>,
    pub stats: Vec<(ModuleKind, BatchStats<T>)>,
}

/// conv1 → bn1 → relu → conv2 → (γ, β) modulation → bn2 → relu.
pub fn film_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    code: Var,
    v: &FilmLayerVars,
    modes: [&BnMode<T>; 2],
) -> Result<LayerOutput<T>> {
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut stats = Vec::new();
    let c1 = tape.conv2d(x, v.conv1, 1)?;
    let (b1, s1) = tape.batch_norm(c1, v.bn1.gamma, v.bn1.beta, modes[0], eps)?;
    stats.extend(s1.map(|s| (ModuleKind::Bn1, s)));
    let r1 = tape.relu(b1)?;
    let c2 = tape.conv2d(r1, v.conv2, 1)?;
    let gamma = nn::linear(tape, code, &v.mod_gamma)?;
    let beta = nn::linear(tape, code, &v.mod_beta)?;
    let m = tape.film(c2, gamma, beta)?;
    let (b2, s2) = tape.batch_norm(m, v.bn2.gamma, v.bn2.beta, modes[1], eps)?;
    stats.extend(s2.map(|s| (ModuleKind::Bn2, s)));
    let output = tape.relu(b2)?;
    Ok(LayerOutput {
        output,
        activations: vec![
            (ModuleKind::Conv1, c1),
            (ModuleKind::Bn1, b1),
            (ModuleKind::Conv2, c2),
            (ModuleKind::ModGamma, gamma),
            (ModuleKind::ModBeta, beta),
            (ModuleKind::Bn2, b2),
        ],
        stats,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerLayerVars {
    pub attn: AttentionVars,
    pub norm1: NormVars,
    pub ffn1: LinearVars,
    pub ffn2: LinearVars,
    pub norm2: NormVars,
}

/// Post-norm encoder layer: `h = norm1(x + attn(x))`, `y = norm2(h + ffn2(relu(ffn1(h))))`.
pub fn transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    key_mask: Option<&[bool]>,
    v: &TransformerLayerVars,
    heads: usize,
) -> Result<LayerOutput<T>> {
    let eps = T::from_f64_lossy(NORM_EPS);
    let a = nn::multi_head_attention(tape, x, &v.attn, heads, key_mask)?.output;
    let h = tape.add(x, a)?;
    let h = tape.layer_norm(h, v.norm1.gamma, v.norm1.beta, eps)?;
    let f1 = nn::linear(tape, h, &v.ffn1)?;
    let r = tape.relu(f1)?;
    let f2 = nn::linear(tape, r, &v.ffn2)?;
    let y = tape.add(h, f2)?;
    let output = tape.layer_norm(y, v.norm2.gamma, v.norm2.beta, eps)?;
    Ok(LayerOutput {
        output,
        activations: vec![
            (ModuleKind::Attn, a),
            (ModuleKind::Norm1, h),
            (ModuleKind::Ffn1, f1),
            (ModuleKind::Ffn2, f2),
            (ModuleKind::Norm2, output),
        ],
        stats: Vec::new(),
    })
}

fn path(cfg: &ModelConfig, layer: usize, kind: ModuleKind) -> ModulePath {
    ModulePath {
        arch: cfg.arch,
        layer,
        kind,
    }
}

pub fn film_layer_vars<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    layer: usize,
) -> Result<FilmLayerVars> {
    use ModuleKind::*;
    let m = |k| src.module(path(cfg, layer, k));
    Ok(FilmLayerVars {
        conv1: param(tape, m(Conv1)?, "kernel")?,
        bn1: norm_vars(tape, m(Bn1)?, "")?,
        conv2: param(tape, m(Conv2)?, "kernel")?,
        mod_gamma: linear_vars(tape, m(ModGamma)?, "")?,
        mod_beta: linear_vars(tape, m(ModBeta)?, "")?,
        bn2: norm_vars(tape, m(Bn2)?, "")?,
    })
}

pub fn transformer_layer_vars<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    layer: usize,
) -> Result<TransformerLayerVars> {
    use ModuleKind::*;
    let m = |k| src.module(path(cfg, layer, k));
    let attn = m(Attn)?;
    Ok(TransformerLayerVars {
        attn: AttentionVars {
            query: linear_vars(tape, attn, "query.")?,
            key: linear_vars(tape, attn, "key.")?,
            value: linear_vars(tape, attn, "value.")?,
            output: linear_vars(tape, attn, "output.")?,
        },
        norm1: norm_vars(tape, m(Norm1)?, "")?,
        ffn1: linear_vars(tape, m(Ffn1)?, "")?,
        ffn2: linear_vars(tape, m(Ffn2)?, "")?,
        norm2: norm_vars(tape, m(Norm2)?, "")?,
    })
}

/// Stacks rasters into `[M, 3, H, W]`.
pub fn image_batch<T: Scalar>(images: &[&Raster]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return config("empty image batch");
    };
    let (h, w) = (first.height, first.width);
    let plane = 3 * h * w;
    let mut data = vec![T::zero(); images.len() * plane];
    for (i, r) in images.iter().enumerate() {
        if (r.height, r.width) != (h, w) {
            return config("rasters of different sizes in one batch");
        }
        r.write_scaled(&mut data[i * plane..(i + 1) * plane]);
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

/// Vision encoder `h`: coordinate planes are appended, then three stride-2
/// conv + batch-norm + relu stages.
pub fn vision<T: Scalar>(
    tape: &mut Tape<T>,
    src: &dyn ModuleSource<T>,
    images: Var,
    pass: &mut Pass<T>,
) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    let (m, h, w) = (shape[0], shape[2], shape[3]);
    let mut coords = Vec::with_capacity(m * 2 * h * w);
    for _ in 0..m {
        for y in 0..h {
            for _ in 0..w {
                coords.push(T::from_f64_lossy(2.0 * (y as f64 + 0.5) / h as f64 - 1.0));
            }
        }
        for _ in 0..h {
            for x in 0..w {
                coords.push(T::from_f64_lossy(2.0 * (x as f64 + 0.5) / w as f64 - 1.0));
            }
        }
    }
    let coords = tape.constant(Tensor::new(vec![m, 2, h, w], coords)?);
    let mut x = tape.concat(&[images, coords], 1)?;
    let enc = src.encoders();
    let eps = T::from_f64_lossy(NORM_EPS);
    for i in 0..3 {
        let k = param(tape, enc, &format!("vision.conv{i}.kernel"))?;
        let prefix = format!("vision.bn{i}.");
        let nv = norm_vars(tape, enc, &prefix)?;
        let mode = bn_mode(enc, &prefix, pass.training)?;
        let c = tape.conv2d(x, k, 2)?;
        let (b, stats) = tape.batch_norm(c, nv.gamma, nv.beta, &mode, eps)?;
        if let Some(stats) = stats {
            pass.bn_updates.push(BnUpdate {
                site: StatSite::Encoder(prefix),
                stats,
            });
        }
        x = tape.relu(b)?;
    }
    Ok(x)
}

/// Encoded instruction batch: FiLM gives `[N, instr_dim]`, the transformer
/// `[N, words, d_model]` with a validity mask over word positions.
#[derive(Clone, Debug)]
pub struct Language {
    pub var: Var,
    pub words: usize,
    pub mask: Vec<bool>,
}

/// Pads token sequences with the padding id; returns ids, mask and width.
pub fn pad_tokens(cfg: &ModelConfig, tokens: &[&[u16]]) -> Result<(Vec<usize>, Vec<bool>, usize)> {
    let words = tokens.iter().map(|t| t.len()).max().unwrap_or(0);
    if words == 0 || tokens.iter().any(|t| t.is_empty()) {
        return config("empty instruction");
    }
    if words > cfg.max_words() {
        return config(format!("instruction of {words} tokens exceeds {}", cfg.max_words()));
    }
    let mut ids = Vec::with_capacity(tokens.len() * words);
    let mut mask = Vec::with_capacity(tokens.len() * words);
    for t in tokens {
        for i in 0..words {
            match t.get(i) {
                Some(&id) if (id as usize) < cfg.pad() => {
                    ids.push(id as usize);
                    mask.push(true);
                }
                Some(&id) => return config(format!("token id {id} outside the vocabulary")),
                None => {
                    ids.push(cfg.pad());
                    mask.push(false);
                }
            }
        }
    }
    Ok((ids, mask, words))
}

/// Language encoder `g`.
pub fn language<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    tokens: &[&[u16]],
) -> Result<Language> {
    let (ids, mask, words) = pad_tokens(cfg, tokens)?;
    let n = tokens.len();
    let enc = src.encoders();
    let table = param(tape, enc, "lang.embedding")?;
    let emb = tape.embedding(table, &ids)?;
    let width = tape.shape(emb)[1];
    let emb = tape.reshape(emb, vec![n, words, width])?;
    let var = match cfg.arch {
        Arch::Transformer => emb,
        Arch::Film => {
            let p = GruVars {
                w_input: param(tape, enc, "lang.gru.w_input")?,
                w_hidden: param(tape, enc, "lang.gru.w_hidden")?,
                b_input: param(tape, enc, "lang.gru.b_input")?,
                b_hidden: param(tape, enc, "lang.gru.b_hidden")?,
            };
            nn::gru_encode(tape, emb, &p, Some(&mask))?
        }
    };
    Ok(Language { var, words, mask })
}

/// Visual feature map `[N, C, gh, gw]` as projected tokens `[N, G, d_model]`.
fn visual_tokens<T: Scalar>(tape: &mut Tape<T>, src: &dyn ModuleSource<T>, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    let t = tape.permute(features, &[0, 2, 3, 1])?;
    let t = tape.reshape(t, vec![s[0], s[2] * s[3], s[1]])?;
    let proj = linear_vars(tape, src.encoders(), "vision.proj.")?;
    Ok(nn::linear(tape, t, &proj)?)
}

/// Fusion network `f` followed by pooling; returns `[N, fused_width]`.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    features: Var,
    lang: &Language,
    pass: &mut Pass<T>,
) -> Result<Var> {
    let n = tape.shape(features)[0];
    match cfg.arch {
        Arch::Film => {
            let mut x = features;
            for layer in 0..cfg.layers {
                let v = film_layer_vars(tape, cfg, src, layer)?;
                let m1 = bn_mode(src.module(path(cfg, layer, ModuleKind::Bn1))?, "", pass.training)?;
                let m2 = bn_mode(src.module(path(cfg, layer, ModuleKind::Bn2))?, "", pass.training)?;
                let out = film_layer(tape, x, lang.var, &v, [&m1, &m2])?;
                for (kind, stats) in out.stats {
                    pass.bn_updates.push(BnUpdate {
                        site: StatSite::Module(path(cfg, layer, kind)),
                        stats,
                    });
                }
                pass.activations
                    .extend(out.activations.into_iter().map(|(k, v)| (path(cfg, layer, k), v)));
                x = out.output;
            }
            tape.pool(x, &[2, 3], PoolMode::Max).map_err(Into::into)
        }
        Arch::Transformer => {
            let visual = visual_tokens(tape, src, features)?;
            let g = tape.shape(visual)[1];
            let mut x = tape.concat(&[lang.var, visual], 1)?;
            let s = lang.words + g;
            let pos_ids: Vec<usize> = (0..n)
                .flat_map(|_| (0..lang.words).chain(cfg.max_words()..cfg.max_words() + g))
                .collect();
            let table = param(tape, src.encoders(), "pos_embedding")?;
            let pos = tape.embedding(table, &pos_ids)?;
            let pos = tape.reshape(pos, vec![n, s, cfg.d_model])?;
            x = tape.add(x, pos)?;
            let mut mask = Vec::with_capacity(n * s);
            for row in lang.mask.chunks(lang.words) {
                mask.extend_from_slice(row);
                mask.extend(std::iter::repeat_n(true, g));
            }
            for layer in 0..cfg.layers {
                let v = transformer_layer_vars(tape, cfg, src, layer)?;
                let out = transformer_layer(tape, x, Some(&mask), &v, cfg.heads)?;
                pass.activations
                    .extend(out.activations.into_iter().map(|(k, v)| (path(cfg, layer, k), v)));
                x = out.output;
            }
            let visual_out = tape.narrow(x, 1, lang.words, g)?;
            tape.pool(visual_out, &[1], PoolMode::Mean).map_err(Into::into)
        }
    }
}

/// Decoder `d`.
pub fn decode<T: Scalar>(tape: &mut Tape<T>, src: &dyn ModuleSource<T>, pooled: Var) -> Result<Var> {
    let d = linear_vars(tape, src.encoders(), "decoder.")?;
    nn::linear(tape, pooled, &d).map_err(Into::into)
}

/// Hypothesis embedding `d(pool(h(o)))` from vision features; the fusion
/// network is bypassed.
pub fn hypothesis<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    features: Var,
) -> Result<Var> {
    let pooled = match cfg.arch {
        Arch::Film => tape.pool(features, &[2, 3], PoolMode::Max)?,
        Arch::Transformer => {
            let t = visual_tokens(tape, src, features)?;
            tape.pool(t, &[1], PoolMode::Mean)?
        }
    };
    decode(tape, src, pooled)
}

/// Premise embedding `d(f(h(o), g(l)))` in evaluation mode.
pub fn forward_premise<T: Scalar>(
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    tokens: &[&[u16]],
    premises: &[&Raster],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut pass = Pass::eval();
    let images = tape.constant(image_batch(premises)?);
    let features = vision(&mut tape, src, images, &mut pass)?;
    let lang = language(&mut tape, cfg, src, tokens)?;
    let pooled = fuse(&mut tape, cfg, src, features, &lang, &mut pass)?;
    let out = decode(&mut tape, src, pooled)?;
    Ok(tape.value(out).clone())
}

/// Hypothesis embedding in evaluation mode.
pub fn forward_hypothesis<T: Scalar>(
    cfg: &ModelConfig,
    src: &dyn ModuleSource<T>,
    images: &[&Raster],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut pass = Pass::eval();
    let x = tape.constant(image_batch(images)?);
    let features = vision(&mut tape, src, x, &mut pass)?;
    let out = hypothesis(&mut tape, cfg, src, features)?;
    Ok(tape.value(out).clone())
}

/// A complete model with one table per module. Used for initialisation and
/// as the template a [`crate::specialization::ParameterBank`] is built from.
#[derive(Clone, Debug)]
pub struct VlModel<T> {
    pub config: ModelConfig,
    pub encoders: ParamStore<T>,
    pub modules: BTreeMap<ModulePath, ParamStore<T>>,
}

impl<T: Scalar> VlModel<T> {
    pub fn new(config: ModelConfig, seed: SeedTree) -> Result<Self> {
        config.validate()?;
        let encoders = init::build_store(ENCODER_STORE, &init::encoder_specs(&config), seed.child("encoders"))?;
        let mut modules = BTreeMap::new();
        for (i, p) in list_modules(config.arch, config.layers).into_iter().enumerate() {
            let store = init::build_store(
                StoreId(i as u32 + 1),
                &init::module_specs(&config, p),
                seed.child(&p.to_string()),
            )?;
            modules.insert(p, store);
        }
        Ok(Self {
            config,
            encoders,
            modules,
        })
    }

    /// Marks `g`, `h` and `d` as non-trainable.
    pub fn freeze_encoders(&mut self) {
        for p in self.encoders.iter_mut() {
            p.trainable = false;
        }
    }

    pub fn encoders_frozen(&self) -> bool {
        self.encoders.iter().all(|p| !p.trainable)
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut v = vec![&mut self.encoders];
        v.extend(self.modules.values_mut());
        v
    }

    pub fn store_by_id_mut(&mut self, id: StoreId) -> Option<&mut ParamStore<T>> {
        self.stores_mut().into_iter().find(|s| s.id() == id)
    }

    /// Number of trainable-by-design fusion parameters (running statistics excluded).
    pub fn fusion_params(&self) -> usize {
        self.modules.values().map(trainable_numel).sum()
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        for u in updates {
            match &u.site {
                StatSite::Encoder(prefix) => apply_bn_update(&mut self.encoders, prefix, &u.stats)?,
                StatSite::Module(p) => {
                    let store = self
                        .modules
                        .get_mut(p)
                        .ok_or_else(|| LilacError::Lookup(p.to_string()))?;
                    apply_bn_update(store, "", &u.stats)?
                }
            }
        }
        Ok(())
    }
}

/// Element count of the parameters that gradients can reach.
pub fn trainable_numel<T: Scalar>(store: &ParamStore<T>) -> usize {
    store
        .iter()
        .filter(|p| !p.id.starts_with("running_") && !p.id.contains(".running_"))
        .map(|p| p.value.numel())
        .sum()
}

impl<T: Scalar> ModuleSource<T> for VlModel<T> {
    fn encoders(&self) -> &ParamStore<T> {
        &self.encoders
    }

    fn module(&self, path: ModulePath) -> Result<&ParamStore<T>> {
        self.modules
            .get(&path)
            .ok_or_else(|| LilacError::Lookup(format!("module {path} not in model")))
    }
}

/// Order-sensitive FNV-1a fingerprint over parameter names and value bytes.
pub fn fingerprint<'a, T: Scalar + 'a>(stores: impl IntoIterator<Item = &'a ParamStore<T>>) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for s in stores {
        for p in s.iter() {
            eat(p.id.as_bytes());
            eat(&p.value.to_le_bytes());
        }
    }
    h
}
