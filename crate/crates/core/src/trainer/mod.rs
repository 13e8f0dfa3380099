//! Contrastive training, the adaptation-and-consolidation schedule and the
//! continual-learning baselines.

pub mod continual;
pub mod encode;
pub mod ewc;
pub mod importance;
pub mod init;
pub mod replay;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config, LilacError, Result};
use crate::model::Arch;

pub use continual::{run_baseline, prepare, Prepared, RunOptions, RunOutput, Session};
pub use encode::{accuracy, infonce_loss, predict, EncodedTask, Item};
pub use ewc::FisherState;
pub use importance::{ImportanceDump, ImportanceRecorder};
pub use init::train_init;
pub use replay::ReservoirBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub lr: f64,
    pub batch: usize,
    pub init_epochs: usize,
    /// Adaptation epochs per task under A&C.
    pub adapt_epochs: usize,
    pub adapt_freq: usize,
    /// Epochs per task for jointly trained runs; defaults to the A&C total
    /// `adapt_epochs + adapt_epochs / adapt_freq`.
    #[serde(default)]
    pub joint_epochs: Option<usize>,
    pub temperature: f64,
    pub ewc_discount: f64,
    pub ewc_lambda_joint: f64,
    pub ewc_lambda_ac: f64,
    pub buffer: usize,
}

impl TrainConfig {
    pub fn paper(arch: Arch, dataset: Dataset) -> Self {
        let two_d = dataset == Dataset::TwoD;
        let lr = match (arch, two_d) {
            (Arch::Transformer, true) => 6e-4,
            (Arch::Transformer, false) => 7e-4,
            (Arch::Film, true) => 8e-4,
            (Arch::Film, false) => 1e-3,
        };
        Self {
            init_lr: if two_d { 4.5e-4 } else { 2e-4 },
            lr,
            batch: 128,
            init_epochs: 10,
            adapt_epochs: 30,
            adapt_freq: 6,
            joint_epochs: None,
            temperature: 0.5,
            ewc_discount: 0.9,
            ewc_lambda_joint: if two_d { 2000.0 } else { 600.0 },
            ewc_lambda_ac: 20000.0,
            buffer: 3000,
        }
    }

    pub fn desk(arch: Arch, dataset: Dataset) -> Self {
        Self {
            batch: 32,
            adapt_epochs: 12,
            ..Self::paper(arch, dataset)
        }
    }

    pub fn joint_epochs(&self) -> usize {
        self.joint_epochs
            .unwrap_or(self.adapt_epochs + self.adapt_epochs / self.adapt_freq.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapt_freq == 0 {
            return config("adapt_freq must be at least 1");
        }
        if self.batch < 2 {
            return config("batch size must be at least 2");
        }
        if !(self.temperature > 0.0) {
            return config("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.ewc_discount) {
            return config("EWC discount must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.init_lr > 0.0) {
            return config("learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Adaptation and consolidation.
    Ac,
    /// Selected and shared parameters updated together.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hook {
    None,
    Er,
    Ewc,
}

/// A training method. Names: `sft`, `er`, `ewc`, `mtl`, `expert`, a
/// strategy name or path list (A&C), optionally suffixed `+er`, `+ewc` or
/// `+joint`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Baseline {
    Mtl,
    Continual {
        strategy: String,
        schedule: Schedule,
        hook: Hook,
    },
}

impl Baseline {
    pub fn sft() -> Self {
        Self::joint("monolithic", Hook::None)
    }

    pub fn joint(strategy: &str, hook: Hook) -> Self {
        Self::Continual {
            strategy: strategy.into(),
            schedule: Schedule::Joint,
            hook,
        }
    }

    pub fn ac(strategy: &str, hook: Hook) -> Self {
        Self::Continual {
            strategy: strategy.into(),
            schedule: Schedule::Ac,
            hook,
        }
    }
}

impl FromStr for Baseline {
    type Err = LilacError;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "" => return config("empty baseline name"),
            "mtl" => return Ok(Self::Mtl),
            "sft" => return Ok(Self::sft()),
            "er" => return Ok(Self::joint("monolithic", Hook::Er)),
            "ewc" => return Ok(Self::joint("monolithic", Hook::Ewc)),
            "expert" => return Ok(Self::joint("expert", Hook::None)),
            _ => {}
        }
        let (rest, hook) = if let Some(b) = s.strip_suffix("+er") {
            (b, Hook::Er)
        } else if let Some(b) = s.strip_suffix("+ewc") {
            (b, Hook::Ewc)
        } else {
            (s, Hook::None)
        };
        let (base, schedule) = match rest.strip_suffix("+joint") {
            Some(b) => (b, Schedule::Joint),
            None => (rest, Schedule::Ac),
        };
        if base.is_empty() || base.contains('+') {
            return config(format!("cannot parse baseline {s:?}"));
        }
        Ok(Self::Continual {
            strategy: base.into(),
            schedule,
            hook,
        })
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Mtl => f.write_str("mtl"),
            Baseline::Continual {
                strategy,
                schedule,
                hook,
            } => match (strategy.as_str(), schedule, hook) {
                ("monolithic", Schedule::Joint, Hook::None) => f.write_str("sft"),
                ("monolithic", Schedule::Joint, Hook::Er) => f.write_str("er"),
                ("monolithic", Schedule::Joint, Hook::Ewc) => f.write_str("ewc"),
                ("expert", Schedule::Joint, Hook::None) => f.write_str("expert"),
                (s, Schedule::Ac, Hook::None) => f.write_str(s),
                (s, Schedule::Ac, Hook::Er) => write!(f, "{s}+er"),
                (s, Schedule::Ac, Hook::Ewc) => write!(f, "{s}+ewc"),
                (s, Schedule::Joint, Hook::None) => write!(f, "{s}+joint"),
                (s, Schedule::Joint, Hook::Er) => write!(f, "{s}+joint+er"),
                (s, Schedule::Joint, Hook::Ewc) => write!(f, "{s}+joint+ewc"),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Adapt,
    Consolidate,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub run_id: String,
    pub task: u16,
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
}

/// Fingerprints of the shared and task partitions around one A&C epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashCheck {
    pub task: u16,
    pub epoch: usize,
    pub phase: Phase,
    pub shared_before: u64,
    pub shared_after: u64,
    pub task_before: u64,
    pub task_after: u64,
}

impl HashCheck {
    /// Adaptation leaves shared values alone; consolidation leaves task values alone.
    pub fn holds(&self) -> bool {
        match self.phase {
            Phase::Adapt => self.shared_before == self.shared_after,
            Phase::Consolidate => self.task_before == self.task_after,
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_names_round_trip() {
        for name in ["sft", "er", "ewc", "mtl", "expert", "all-attn", "all-attn+er", "last-layer+ewc", "all-ffn1+joint", "all-attn+joint+er"] {
            let b: Baseline = name.parse().unwrap();
            assert_eq!(b.to_string(), name);
        }
        assert!("all-attn+foo".parse::<Baseline>().is_err());
    }

    #[test]
    fn joint_epochs_match_ac_total() {
        assert_eq!(TrainConfig::desk(Arch::Film, Dataset::TwoD).joint_epochs(), 14);
        assert_eq!(TrainConfig::paper(Arch::Film, Dataset::TwoD).joint_epochs(), 35);
    }
}
