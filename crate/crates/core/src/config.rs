//! Experiment configuration.
//!
//! A config file is plain text made of `[section]` headers and `key = value`
//! lines; `#` starts a comment. Every key has a default, so an empty file is
//! valid. Unknown sections or keys and out-of-range values are rejected with
//! the offending `section.key` named. [`ExperimentConfig::dump`] prints the
//! full grammar with current values.

use std::fmt::Write as _;
use std::path::Path;

use crate::contrastive::{BankMode, BankSource};
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::eval::FinetuneMode;
use crate::federation::{SyncMomentum, SyncSet};
use crate::mae::LossScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    FedClf,
    FedMae,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::FedClf => "fedclf",
            Protocol::FedMae => "fedmae",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

impl OptimizerChoice {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerChoice::Sgd => "sgd",
            OptimizerChoice::Adam => "adam",
        }
    }
}

/// Where fine-tuning starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FinetuneInit {
    Pretrained,
    Random,
}

impl FinetuneInit {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneInit::Pretrained => "pretrained",
            FinetuneInit::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub rounds: usize,
    pub batch: usize,
    pub uniform_avg: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClfConfig {
    pub local_epochs: usize,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub momentum: f64,
    pub bank_capacity: usize,
    pub bank_mode: BankMode,
    pub bank_source: BankSource,
    pub sync_momentum: SyncMomentum,
    pub refresh_banks: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeConfig {
    pub local_epochs: usize,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub weight_decay: f64,
    pub sync_set: SyncSet,
    pub mask_ratio: f64,
    pub loss_scope: LossScope,
    pub final_aggregate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSection {
    pub mode: FinetuneMode,
    pub label_fraction: f64,
    pub epochs: usize,
    pub rounds: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub freeze_encoder: bool,
    pub zero_head: bool,
    pub augment: bool,
    pub init: FinetuneInit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub variants: Vec<String>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub workers: usize,
    pub data: SynthSpec,
    pub pretrain: PretrainConfig,
    pub fedclf: ClfConfig,
    pub fedmae: MaeConfig,
    pub finetune: FinetuneSection,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            protocol: Protocol::FedClf,
            seed: 0,
            workers: 1,
            data: SynthSpec::default(),
            pretrain: PretrainConfig {
                rounds: 20,
                batch: 16,
                uniform_avg: false,
            },
            fedclf: ClfConfig {
                local_epochs: 1,
                optimizer: OptimizerChoice::Sgd,
                lr: 0.03,
                sgd_momentum: 0.9,
                weight_decay: 0.0,
                tau: 0.07,
                momentum: 0.99,
                bank_capacity: 256,
                bank_mode: BankMode::RemoteOnly,
                bank_source: BankSource::KPlus,
                sync_momentum: SyncMomentum::Reset,
                refresh_banks: true,
            },
            fedmae: MaeConfig {
                local_epochs: 10,
                optimizer: OptimizerChoice::Adam,
                lr: 1e-3,
                weight_decay: 0.0,
                sync_set: SyncSet::WoClassToken,
                mask_ratio: 0.75,
                loss_scope: LossScope::Full,
                final_aggregate: true,
            },
            finetune: FinetuneSection {
                mode: FinetuneMode::Federated,
                label_fraction: 0.1,
                epochs: 5,
                rounds: 40,
                lr: 0.01,
                weight_decay: 0.0,
                batch: 16,
                freeze_encoder: false,
                zero_head: false,
                augment: true,
                init: FinetuneInit::Pretrained,
            },
            ablate: AblateConfig {
                variants: Vec::new(),
                seeds: 3,
            },
        }
    }
}

fn bad(key: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::config(key, msg)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_usize(key: &str, v: &str, lo: usize, hi: usize) -> Result<usize> {
    let n: usize = parse_num(key, v)?;
    if n < lo || n > hi {
        return Err(bad(key, format!("{n} outside [{lo}, {hi}]")));
    }
    Ok(n)
}

/// Parses a float in `[lo, hi]`; `open_lo`/`open_hi` exclude the ends.
fn parse_f64(key: &str, v: &str, lo: f64, hi: f64, open_lo: bool, open_hi: bool) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    let ok = x.is_finite() && if open_lo { x > lo } else { x >= lo } && if open_hi { x < hi } else { x <= hi };
    if !ok {
        let l = if open_lo { '(' } else { '[' };
        let h = if open_hi { ')' } else { ']' };
        return Err(bad(key, format!("{x} outside {l}{lo}, {hi}{h}")));
    }
    Ok(x)
}

fn parse_enum<T>(key: &str, v: &str, f: impl Fn(&str) -> Option<T>, allowed: &str) -> Result<T> {
    f(v).ok_or_else(|| bad(key, format!("`{v}` is not one of {allowed}")))
}

fn optimizer_from(s: &str) -> Option<OptimizerChoice> {
    match s {
        "sgd" => Some(OptimizerChoice::Sgd),
        "adam" => Some(OptimizerChoice::Adam),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Sets one `section.key` from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "run.name" => {
                if v.is_empty() || !v.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                    return Err(bad(key, "use letters, digits, `-`, `_` or `.`"));
                }
                self.name = v.to_string();
            }
            "run.protocol" => {
                self.protocol = parse_enum(
                    key,
                    v,
                    |s| match s {
                        "fedclf" => Some(Protocol::FedClf),
                        "fedmae" => Some(Protocol::FedMae),
                        _ => None,
                    },
                    "fedclf, fedmae",
                )?
            }
            "run.seed" => self.seed = parse_num(key, v)?,
            "run.workers" => self.workers = parse_usize(key, v, 1, 256)?,

            "data.num_classes" => self.data.num_classes = parse_usize(key, v, 2, 64)?,
            "data.clients" => self.data.clients = parse_usize(key, v, 1, 1000)?,
            "data.samples_per_client" => self.data.samples_per_client = parse_usize(key, v, 1, 100_000)?,
            "data.noise" => self.data.noise = parse_f64(key, v, 0.0, 1.0, false, false)?,
            "data.amplitude" => self.data.amplitude = parse_f64(key, v, 0.0, 1.0, false, false)?,
            "data.color_jitter" => self.data.color_jitter = parse_f64(key, v, 0.0, 1.0, false, false)?,
            "data.group_strength" => self.data.group_strength = parse_f64(key, v, 0.0, 1.0, false, false)?,

            "pretrain.rounds" => self.pretrain.rounds = parse_usize(key, v, 0, 100_000)?,
            "pretrain.batch" => self.pretrain.batch = parse_usize(key, v, 1, 4096)?,
            "pretrain.uniform_avg" => self.pretrain.uniform_avg = parse_bool(key, v)?,

            "fedclf.local_epochs" => self.fedclf.local_epochs = parse_usize(key, v, 0, 1000)?,
            "fedclf.optimizer" => self.fedclf.optimizer = parse_enum(key, v, optimizer_from, "sgd, adam")?,
            "fedclf.lr" => self.fedclf.lr = parse_f64(key, v, 0.0, 10.0, false, false)?,
            "fedclf.sgd_momentum" => self.fedclf.sgd_momentum = parse_f64(key, v, 0.0, 1.0, false, true)?,
            "fedclf.weight_decay" => self.fedclf.weight_decay = parse_f64(key, v, 0.0, 1.0, false, false)?,
            "fedclf.tau" => self.fedclf.tau = parse_f64(key, v, 0.0, 100.0, true, false)?,
            "fedclf.momentum" => self.fedclf.momentum = parse_f64(key, v, 0.0, 1.0, false, true)?,
            "fedclf.bank_capacity" => self.fedclf.bank_capacity = parse_usize(key, v, 1, 1 << 20)?,
            "fedclf.bank_mode" => {
                self.fedclf.bank_mode = parse_enum(key, v, BankMode::from_name, "local_only, with_local, remote_only")?
            }
            "fedclf.bank_source" => self.fedclf.bank_source = parse_enum(key, v, BankSource::from_name, "kplus, clean")?,
            "fedclf.refresh_banks" => self.fedclf.refresh_banks = parse_bool(key, v)?,
            "fedclf.sync_momentum" => self.fedclf.sync_momentum = parse_enum(key, v, SyncMomentum::from_name, "reset, keep")?,

            "fedmae.local_epochs" => self.fedmae.local_epochs = parse_usize(key, v, 0, 1000)?,
            "fedmae.optimizer" => self.fedmae.optimizer = parse_enum(key, v, optimizer_from, "sgd, adam")?,
            "fedmae.lr" => self.fedmae.lr = parse_f64(key, v, 0.0, 10.0, false, false)?,
            "fedmae.weight_decay" => self.fedmae.weight_decay = parse_f64(key, v, 0.0, 1.0, false, false)?,
            "fedmae.sync_set" => {
                self.fedmae.sync_set = parse_enum(
                    key,
                    v,
                    SyncSet::from_name,
                    "encoder_plus_decoder, wo_decoder, wo_linear_projection, wo_decoder_projection, wo_class_token",
                )?
            }
            "fedmae.mask_ratio" => self.fedmae.mask_ratio = parse_f64(key, v, 0.0, 1.0, true, true)?,
            "fedmae.loss_scope" => self.fedmae.loss_scope = parse_enum(key, v, LossScope::from_name, "full, masked")?,
            "fedmae.final_aggregate" => self.fedmae.final_aggregate = parse_bool(key, v)?,

            "finetune.mode" => self.finetune.mode = parse_enum(key, v, FinetuneMode::from_name, "local, federated")?,
            "finetune.label_fraction" => self.finetune.label_fraction = parse_f64(key, v, 0.0, 1.0, true, false)?,
            "finetune.epochs" => self.finetune.epochs = parse_usize(key, v, 0, 100_000)?,
            "finetune.rounds" => self.finetune.rounds = parse_usize(key, v, 0, 100_000)?,
            "finetune.lr" => self.finetune.lr = parse_f64(key, v, 0.0, 10.0, false, false)?,
            "finetune.weight_decay" => self.finetune.weight_decay = parse_f64(key, v, 0.0, 1.0, false, false)?,
            "finetune.batch" => self.finetune.batch = parse_usize(key, v, 1, 4096)?,
            "finetune.freeze_encoder" => self.finetune.freeze_encoder = parse_bool(key, v)?,
            "finetune.zero_head" => self.finetune.zero_head = parse_bool(key, v)?,
            "finetune.augment" => self.finetune.augment = parse_bool(key, v)?,
            "finetune.init" => {
                self.finetune.init = parse_enum(
                    key,
                    v,
                    |s| match s {
                        "pretrained" => Some(FinetuneInit::Pretrained),
                        "random" => Some(FinetuneInit::Random),
                        _ => None,
                    },
                    "pretrained, random",
                )?
            }

            "ablate.variants" => {
                self.ablate.variants = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect();
                for name in &self.ablate.variants {
                    if crate::experiment::Variant::from_name(name).is_none() {
                        return Err(bad(key, format!("unknown variant `{name}`")));
                    }
                }
            }
            "ablate.seeds" => self.ablate.seeds = parse_usize(key, v, 1, 1000)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Checks constraints that span several keys.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.pretrain.batch < 1 {
            return Err(bad("pretrain.batch", "must be positive"));
        }
        Ok(())
    }

    /// Parses a config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| bad(format!("line {}", lineno + 1), format!("malformed section header `{line}`")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(bad(name, "unknown section"));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if section.is_empty() {
                return Err(bad(k, "key outside of any section"));
            }
            cfg.set(&format!("{section}.{k}"), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `section.key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| bad(o, "override must look like section.key=value"))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// The config as a parseable file.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let b = |x: bool| if x { "true" } else { "false" };
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "protocol = {}            # fedclf | fedmae", self.protocol.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "workers = {}", self.workers);
        let d = &self.data;
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "num_classes = {}", d.num_classes);
        let _ = writeln!(s, "clients = {}", d.clients);
        let _ = writeln!(s, "samples_per_client = {}", d.samples_per_client);
        let _ = writeln!(s, "noise = {}", d.noise);
        let _ = writeln!(s, "amplitude = {}", d.amplitude);
        let _ = writeln!(s, "color_jitter = {}", d.color_jitter);
        let _ = writeln!(s, "group_strength = {}", d.group_strength);
        let p = &self.pretrain;
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "rounds = {}", p.rounds);
        let _ = writeln!(s, "batch = {}", p.batch);
        let _ = writeln!(s, "uniform_avg = {}", b(p.uniform_avg));
        let c = &self.fedclf;
        let _ = writeln!(s, "\n[fedclf]");
        let _ = writeln!(s, "local_epochs = {}", c.local_epochs);
        let _ = writeln!(s, "optimizer = {}            # sgd | adam", c.optimizer.name());
        let _ = writeln!(s, "lr = {}", c.lr);
        let _ = writeln!(s, "sgd_momentum = {}", c.sgd_momentum);
        let _ = writeln!(s, "weight_decay = {}", c.weight_decay);
        let _ = writeln!(s, "tau = {}", c.tau);
        let _ = writeln!(s, "momentum = {}", c.momentum);
        let _ = writeln!(s, "bank_capacity = {}", c.bank_capacity);
        let _ = writeln!(s, "bank_mode = {}    # local_only | with_local | remote_only", c.bank_mode.name());
        let _ = writeln!(s, "bank_source = {}        # kplus | clean", c.bank_source.name());
        let _ = writeln!(s, "sync_momentum = {}      # reset | keep", c.sync_momentum.name());
        let _ = writeln!(s, "refresh_banks = {}", b(c.refresh_banks));
        let m = &self.fedmae;
        let _ = writeln!(s, "\n[fedmae]");
        let _ = writeln!(s, "local_epochs = {}", m.local_epochs);
        let _ = writeln!(s, "optimizer = {}", m.optimizer.name());
        let _ = writeln!(s, "lr = {}", m.lr);
        let _ = writeln!(s, "weight_decay = {}", m.weight_decay);
        let _ = writeln!(
            s,
            "sync_set = {}  # encoder_plus_decoder | wo_decoder | wo_linear_projection | wo_decoder_projection | wo_class_token",
            m.sync_set.name()
        );
        let _ = writeln!(s, "mask_ratio = {}", m.mask_ratio);
        let _ = writeln!(s, "loss_scope = {}          # full | masked", m.loss_scope.name());
        let _ = writeln!(s, "final_aggregate = {}", b(m.final_aggregate));
        let f = &self.finetune;
        let _ = writeln!(s, "\n[finetune]");
        let _ = writeln!(s, "mode = {}           # local | federated", f.mode.name());
        let _ = writeln!(s, "label_fraction = {}", f.label_fraction);
        let _ = writeln!(s, "epochs = {}", f.epochs);
        let _ = writeln!(s, "rounds = {}", f.rounds);
        let _ = writeln!(s, "lr = {}", f.lr);
        let _ = writeln!(s, "weight_decay = {}", f.weight_decay);
        let _ = writeln!(s, "batch = {}", f.batch);
        let _ = writeln!(s, "freeze_encoder = {}", b(f.freeze_encoder));
        let _ = writeln!(s, "zero_head = {}", b(f.zero_head));
        let _ = writeln!(s, "augment = {}", b(f.augment));
        let _ = writeln!(s, "init = {}          # pretrained | random", f.init.name());
        let a = &self.ablate;
        let _ = writeln!(s, "\n[ablate]");
        let _ = writeln!(s, "variants = {}", a.variants.join(","));
        let _ = writeln!(s, "seeds = {}", a.seeds);
        s
    }
}

const SECTIONS: [&str; 7] = ["run", "data", "pretrain", "fedclf", "fedmae", "finetune", "ablate"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_defaults() {
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.dump()).unwrap(), d);
    }

    #[test]
    fn overrides_and_roundtrip() {
        let text = "[run]\nprotocol = fedmae\nseed = 5\n[fedmae]\nsync_set = wo_decoder # trailing\n[ablate]\nvariants = with_local, remote_only\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.protocol, Protocol::FedMae);
        assert_eq!(c.seed, 5);
        assert_eq!(c.fedmae.sync_set, SyncSet::WoDecoder);
        assert_eq!(c.ablate.variants.len(), 2);
        assert_eq!(ExperimentConfig::parse(&c.dump()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |t: &str| match ExperimentConfig::parse(t).unwrap_err() {
            Error::Config { key, .. } => key,
            e => panic!("{e}"),
        };
        assert_eq!(key_of("[fedclf]\ntau = 0\n"), "fedclf.tau");
        assert_eq!(key_of("[fedclf]\nbogus = 1\n"), "fedclf.bogus");
        assert_eq!(key_of("[nope]\n"), "nope");
        assert_eq!(key_of("[fedmae]\nmask_ratio = 1.0\n"), "fedmae.mask_ratio");
        assert_eq!(key_of("[data]\nsamples_per_client = 2\n"), "data.samples_per_client");
        assert_eq!(key_of("[ablate]\nvariants = nonsense\n"), "ablate.variants");
    }
}
