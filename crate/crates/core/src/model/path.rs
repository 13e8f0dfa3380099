use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LilacError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Film,
    Transformer,
}

impl Arch {
    pub fn kinds(self) -> &'static [ModuleKind] {
        use ModuleKind::*;
        match self {
            Arch::Film => &[Conv1, Conv2, Bn1, Bn2, ModGamma, ModBeta],
            Arch::Transformer => &[Attn, Norm1, Ffn1, Ffn2, Norm2],
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Film => "film",
            Arch::Transformer => "transformer",
        })
    }
}

impl FromStr for Arch {
    type Err = LilacError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "film" => Ok(Arch::Film),
            "transformer" => Ok(Arch::Transformer),
            _ => Err(LilacError::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    Conv1,
    Conv2,
    Bn1,
    Bn2,
    ModGamma,
    ModBeta,
    Attn,
    Norm1,
    Ffn1,
    Ffn2,
    Norm2,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        use ModuleKind::*;
        match self {
            Conv1 => "conv1",
            Conv2 => "conv2",
            Bn1 => "bn1",
            Bn2 => "bn2",
            ModGamma => "mod_gamma",
            ModBeta => "mod_beta",
            Attn => "attn",
            Norm1 => "norm1",
            Ffn1 => "ffn1",
            Ffn2 => "ffn2",
            Norm2 => "norm2",
        }
    }

    pub fn arch(self) -> Arch {
        use ModuleKind::*;
        match self {
            Conv1 | Conv2 | Bn1 | Bn2 | ModGamma | ModBeta => Arch::Film,
            Attn | Norm1 | Ffn1 | Ffn2 | Norm2 => Arch::Transformer,
        }
    }
}

impl FromStr for ModuleKind {
    type Err = LilacError;
    fn from_str(s: &str) -> Result<Self> {
        [Arch::Film, Arch::Transformer]
            .iter()
            .flat_map(|a| a.kinds())
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| LilacError::Config(format!("unknown module kind {s:?}")))
    }
}

/// A specialisable module of a fusion network, e.g. `transformer:0:attn`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModulePath {
    pub arch: Arch,
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ModulePath {
    pub fn new(arch: Arch, layer: usize, kind: ModuleKind, layers: usize) -> Result<Self> {
        if kind.arch() != arch {
            return Err(LilacError::Config(format!("{} is not a {arch} module", kind.name())));
        }
        if layer >= layers {
            return Err(LilacError::Config(format!("layer {layer} out of range for L={layers}")));
        }
        Ok(Self { arch, layer, kind })
    }

    pub fn parse(s: &str, layers: usize) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [arch, layer, kind] = parts[..] else {
            return Err(LilacError::Config(format!("module path {s:?} is not arch:layer:kind")));
        };
        let layer = layer
            .parse()
            .map_err(|_| LilacError::Config(format!("bad layer index in {s:?}")))?;
        Self::new(arch.parse()?, layer, kind.parse()?, layers)
    }
}

impl fmt::Display for ModulePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.arch, self.layer, self.kind.name())
    }
}

/// All modules of an architecture, layer-major.
pub fn list_modules(arch: Arch, layers: usize) -> Vec<ModulePath> {
    (0..layers)
        .flat_map(|layer| arch.kinds().iter().map(move |&kind| ModulePath { arch, layer, kind }))
        .collect()
}
