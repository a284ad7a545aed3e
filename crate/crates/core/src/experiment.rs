//! End-to-end experiments: data, pretraining, fine-tuning, ablations and the
//! artifacts they leave behind.
//!
//! Every run is a pure function of its [`ExperimentConfig`]. Randomness comes
//! from named child streams of `run.seed`: `data` (synthetic images), `init`
//! (model weights), `server` (remote-bank shuffles), `shuffle`, `augment`,
//! `sampling`, `masks` (local training), `labels` (label masks) and
//! `finetune` (classifier head and fine-tuning batches).

use std::path::Path;

use serde::Serialize;

use crate::config::{ExperimentConfig, FinetuneInit, OptimizerChoice, Protocol};
use crate::contrastive::{self, BankMode, ClConfig};
use crate::data::{self, AugmentConfig, Partition};
use crate::error::{Error, Result};
use crate::eval::{self, Backbone, FinetuneConfig, FinetuneOutcome, MetricsRecord};
use crate::federation::{ClfSettings, FedClf, FedMae, MaeSettings, OptimSettings, RoundReport, SyncSet, Transcript};
use crate::mae::{self, MaeTrainConfig};
use crate::nets::vit::VitConfig;
use crate::nets::{checkpoint, Bound, CnnConfig, CnnEncoder, MaeModel, ParamSet};
use crate::rng::{self, Rng};
use crate::tensor::gradcheck::{GradCase, Instance};
use crate::tensor::{OptimizerKind, Tensor};

/// One arm of an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// FedMAE with the given sync set.
    Sync(SyncSet),
    /// FedCLF with the given negative-bank mode.
    Bank(BankMode),
    /// Fine-tuning from the untrained initialization.
    RandomInit,
}

impl Variant {
    pub fn from_name(s: &str) -> Option<Variant> {
        if s == "random_init" {
            return Some(Variant::RandomInit);
        }
        SyncSet::from_name(s)
            .map(Variant::Sync)
            .or_else(|| BankMode::from_name(s).map(Variant::Bank))
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sync(s) => s.name(),
            Variant::Bank(b) => b.name(),
            Variant::RandomInit => "random_init",
        }
    }

    /// Human-readable row label.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Sync(s) => s.label(),
            Variant::Bank(BankMode::LocalOnly) => "w/o FE",
            Variant::Bank(BankMode::WithLocal) => "FE",
            Variant::Bank(BankMode::RemoteOnly) => "FE+Neg",
            Variant::RandomInit => "Random Init.",
        }
    }

    /// The config this variant runs with.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            Variant::Sync(s) => {
                c.protocol = Protocol::FedMae;
                c.fedmae.sync_set = s;
                c.finetune.init = FinetuneInit::Pretrained;
            }
            Variant::Bank(b) => {
                c.protocol = Protocol::FedClf;
                c.fedclf.bank_mode = b;
                c.finetune.init = FinetuneInit::Pretrained;
            }
            Variant::RandomInit => c.finetune.init = FinetuneInit::Random,
        }
        c
    }
}

/// The backbone a protocol trains, sized to the data.
pub fn backbone(cfg: &ExperimentConfig) -> Result<Backbone> {
    let d = &cfg.data;
    Ok(match cfg.protocol {
        Protocol::FedClf => Backbone::Cnn(CnnEncoder::new(CnnConfig {
            in_channels: d.channels,
            image_size: d.image_size,
            ..CnnConfig::default()
        })),
        Protocol::FedMae => Backbone::Vit(MaeModel::new(VitConfig {
            image_size: d.image_size,
            channels: d.channels,
            ..VitConfig::default()
        })?),
    })
}

/// Untrained pretraining parameters (encoder plus projection head or
/// decoder).
pub fn initial_params(cfg: &ExperimentConfig, backbone: &Backbone) -> ParamSet {
    let mut r = rng::named(cfg.seed, "init");
    match backbone {
        Backbone::Cnn(enc) => enc.init(&mut r, true),
        Backbone::Vit(m) => m.init(&mut r),
    }
}

fn optim(choice: OptimizerChoice, lr: f64, sgd_momentum: f64, weight_decay: f64) -> OptimSettings {
    OptimSettings {
        kind: match choice {
            OptimizerChoice::Sgd => OptimizerKind::Sgd { momentum: sgd_momentum },
            OptimizerChoice::Adam => OptimizerKind::adam(),
        },
        lr,
        weight_decay,
    }
}

pub fn clf_settings(cfg: &ExperimentConfig) -> ClfSettings {
    let c = &cfg.fedclf;
    ClfSettings {
        cl: ClConfig {
            tau: c.tau,
            momentum: c.momentum,
            bank_capacity: c.bank_capacity,
            mode: c.bank_mode,
            bank_source: c.bank_source,
            augment: AugmentConfig::contrastive(),
        },
        rounds: cfg.pretrain.rounds,
        local_epochs: c.local_epochs,
        batch: cfg.pretrain.batch,
        optim: optim(c.optimizer, c.lr, c.sgd_momentum, c.weight_decay),
        sync_momentum: c.sync_momentum,
        refresh_banks: c.refresh_banks,
        uniform_avg: cfg.pretrain.uniform_avg,
        workers: cfg.workers,
        seed: cfg.seed,
    }
}

pub fn mae_settings(cfg: &ExperimentConfig) -> MaeSettings {
    let m = &cfg.fedmae;
    MaeSettings {
        train: MaeTrainConfig {
            mask_ratio: m.mask_ratio,
            scope: m.loss_scope,
            batch: cfg.pretrain.batch,
            augment: AugmentConfig::mae(),
        },
        rounds: cfg.pretrain.rounds,
        local_epochs: m.local_epochs,
        optim: optim(m.optimizer, m.lr, 0.9, m.weight_decay),
        sync: m.sync_set,
        uniform_avg: cfg.pretrain.uniform_avg,
        final_aggregate: m.final_aggregate,
        workers: cfg.workers,
        seed: cfg.seed,
    }
}

pub fn finetune_config(cfg: &ExperimentConfig) -> FinetuneConfig {
    let f = &cfg.finetune;
    FinetuneConfig {
        mode: f.mode,
        label_fraction: f.label_fraction,
        epochs: f.epochs,
        rounds: f.rounds,
        lr: f.lr,
        weight_decay: f.weight_decay,
        batch: f.batch,
        freeze_encoder: f.freeze_encoder,
        zero_head: f.zero_head,
        uniform_avg: cfg.pretrain.uniform_avg,
        augment: f.augment,
    }
}

/// The partition a config describes.
pub fn dataset(cfg: &ExperimentConfig) -> Result<Partition> {
    data::generate(&cfg.data, cfg.seed)
}

/// Checks that an imported partition matches the config's data section.
pub fn check_dataset(cfg: &ExperimentConfig, part: &Partition) -> Result<()> {
    if part.spec != cfg.data {
        return Err(Error::config("data", "dataset on disk was generated with a different data section"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: ParamSet,
    pub reports: Vec<RoundReport>,
    pub transcript: Transcript,
}

/// Federated pretraining with the configured protocol.
pub fn pretrain(cfg: &ExperimentConfig, part: &Partition) -> Result<PretrainOutput> {
    let bb = backbone(cfg)?;
    let init = initial_params(cfg, &bb);
    let shards: Vec<(u32, Tensor)> = part.clients.iter().map(|c| (c.id, c.train.images.clone())).collect();
    match bb {
        Backbone::Cnn(enc) => {
            let mut fed = FedClf::new(clf_settings(cfg), enc, init, shards)?;
            let reports = fed.run()?;
            Ok(PretrainOutput {
                params: fed.global,
                reports,
                transcript: fed.transcript,
            })
        }
        Backbone::Vit(model) => {
            let mut fed = FedMae::new(mae_settings(cfg), model, init, shards)?;
            let reports = fed.run()?;
            Ok(PretrainOutput {
                params: fed.global,
                reports,
                transcript: fed.transcript,
            })
        }
    }
}

/// Fine-tunes from `start`, or from the untrained initialization when the
/// config asks for a random start.
pub fn finetune(cfg: &ExperimentConfig, part: &Partition, start: Option<&ParamSet>) -> Result<FinetuneOutcome> {
    let bb = backbone(cfg)?;
    let random;
    let init = match (cfg.finetune.init, start) {
        (FinetuneInit::Pretrained, Some(p)) => p,
        (FinetuneInit::Pretrained, None) => {
            return Err(Error::config("finetune.init", "pretrained start requested without a checkpoint"));
        }
        (FinetuneInit::Random, _) => {
            random = initial_params(cfg, &bb);
            &random
        }
    };
    eval::finetune(&bb, init, part, &finetune_config(cfg), cfg.seed, cfg.workers)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub pretrain: Option<PretrainOutput>,
    pub finetune: FinetuneOutcome,
}

/// Pretraining (skipped for a random start) followed by fine-tuning.
pub fn run(cfg: &ExperimentConfig, part: &Partition) -> Result<RunOutput> {
    let pre = match cfg.finetune.init {
        FinetuneInit::Pretrained => Some(pretrain(cfg, part)?),
        FinetuneInit::Random => None,
    };
    let finetune = finetune(cfg, part, pre.as_ref().map(|p| &p.params))?;
    Ok(RunOutput { pretrain: pre, finetune })
}

/// One evaluation, flattened for CSV and JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub stage: String,
    pub variant: String,
    pub protocol: String,
    pub mode: String,
    pub label_fraction: f64,
    pub seed: u64,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub macro_specificity: f64,
    pub macro_auc: Option<f64>,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub recall: String,
    pub precision: String,
    pub specificity: String,
    pub f1: String,
    pub zero_division: bool,
    pub auc_excluded: String,
    pub unstratified: bool,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

impl MetricsRow {
    pub fn new(cfg: &ExperimentConfig, stage: &str, variant: &str, out: &FinetuneOutcome) -> Self {
        let m: &MetricsRecord = &out.metrics;
        MetricsRow {
            run_id: cfg.name.clone(),
            stage: stage.to_string(),
            variant: variant.to_string(),
            protocol: cfg.protocol.name().to_string(),
            mode: cfg.finetune.mode.name().to_string(),
            label_fraction: cfg.finetune.label_fraction,
            seed: cfg.seed,
            macro_recall: m.macro_recall,
            macro_precision: m.macro_precision,
            macro_f1: m.macro_f1,
            macro_specificity: m.macro_specificity,
            macro_auc: m.macro_auc,
            accuracy: m.accuracy,
            train_accuracy: out.train_accuracy,
            recall: join(&m.recall),
            precision: join(&m.precision),
            specificity: join(&m.specificity),
            f1: join(&m.f1),
            zero_division: m.zero_division,
            auc_excluded: join(&m.auc_excluded),
            unstratified: out.unstratified,
        }
    }
}

/// Runs every configured variant over `ablate.seeds` seeds, `run.seed`,
/// `run.seed + 1`, and so on. Rows come out variant-major.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    if cfg.ablate.variants.is_empty() {
        return Err(Error::config("ablate.variants", "no variants listed"));
    }
    let mut rows = Vec::new();
    for name in &cfg.ablate.variants {
        let v = Variant::from_name(name).ok_or_else(|| Error::config("ablate.variants", format!("unknown variant `{name}`")))?;
        for s in 0..cfg.ablate.seeds as u64 {
            let mut c = v.apply(cfg);
            c.seed = cfg.seed.wrapping_add(s);
            let part = dataset(&c)?;
            let out = run(&c, &part)?;
            rows.push(MetricsRow::new(&c, "ablate", v.name(), &out.finetune));
        }
    }
    Ok(rows)
}

/// Mean macro metrics of one variant across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub label: String,
    pub seeds: usize,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub macro_specificity: f64,
    pub macro_auc: Option<f64>,
    pub accuracy: f64,
}

/// Averages rows per variant, keeping first-seen order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let g: Vec<&MetricsRow> = rows.iter().filter(|r| r.variant == v).collect();
            let n = g.len() as f64;
            let avg = |f: fn(&MetricsRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            let auc = g.iter().map(|r| r.macro_auc).collect::<Option<Vec<f64>>>().map(|a| a.iter().sum::<f64>() / n);
            SummaryRow {
                variant: v.to_string(),
                label: Variant::from_name(v).map_or_else(|| v.to_string(), |x| x.label().to_string()),
                seeds: g.len(),
                macro_recall: avg(|r| r.macro_recall),
                macro_precision: avg(|r| r.macro_precision),
                macro_f1: avg(|r| r.macro_f1),
                macro_specificity: avg(|r| r.macro_specificity),
                macro_auc: auc,
                accuracy: avg(|r| r.accuracy),
            }
        })
        .collect()
}

/// Writes rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format("csv", format!("{other:?}")),
    }
}

/// Writes rows as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::format("json", e.to_string()))?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Per-round pretraining log line.
#[derive(Debug, Clone, Serialize)]
pub struct RoundLog {
    pub round: u64,
    pub mean_loss: f64,
    pub losses: Vec<(u32, f64)>,
    pub negatives: u64,
    pub self_origin_negatives: u64,
    pub remote_self_entries: u64,
    pub global_digest: String,
}

impl From<&RoundReport> for RoundLog {
    fn from(r: &RoundReport) -> Self {
        RoundLog {
            round: r.round,
            mean_loss: r.mean_loss(),
            losses: r.losses.clone(),
            negatives: r.audit.negatives,
            self_origin_negatives: r.audit.self_origin,
            remote_self_entries: r.remote_self_entries,
            global_digest: crate::digest::hex(r.global_digest),
        }
    }
}

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const ROUNDS_FILE: &str = "rounds.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Persists the config next to a run's outputs.
pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, cfg.dump()).map_err(|e| Error::io(&path, e))
}

/// Writes checkpoint, transcript, round log and config into `dir`.
pub fn write_pretrain(dir: &Path, cfg: &ExperimentConfig, out: &PretrainOutput) -> Result<()> {
    write_config(dir, cfg)?;
    checkpoint::save(&out.params, &dir.join(CHECKPOINT_FILE))?;
    out.transcript.write(&dir.join(TRANSCRIPT_FILE))?;
    let logs: Vec<RoundLog> = out.reports.iter().map(RoundLog::from).collect();
    write_jsonl(&dir.join(ROUNDS_FILE), &logs)
}

/// Writes `metrics.csv` and `metrics.jsonl`.
pub fn write_metrics(dir: &Path, stem: &str, rows: &[MetricsRow]) -> Result<()> {
    create_dir(dir)?;
    write_csv(&dir.join(format!("{stem}.csv")), rows)?;
    write_jsonl(&dir.join(format!("{stem}.jsonl")), rows)
}

fn tiny_cnn() -> CnnEncoder {
    CnnEncoder::new(CnnConfig {
        in_channels: 2,
        image_size: 6,
        conv1_channels: 3,
        conv2_channels: 3,
        proj_hidden: 4,
        proj_dim: 3,
    })
}

fn tiny_vit() -> MaeModel {
    MaeModel::new(VitConfig {
        image_size: 4,
        channels: 1,
        patch: 2,
        embed_dim: 4,
        heads: 2,
        depth: 1,
        mlp_hidden: 6,
        decoder_dim: 4,
        decoder_heads: 2,
        decoder_depth: 1,
        decoder_mlp_hidden: 4,
    })
    .expect("valid toy config")
}

/// Parameters as gradcheck inputs plus their names.
fn param_inputs(p: &ParamSet) -> (Vec<String>, Vec<Tensor>) {
    p.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

fn unit_rows(rows: usize, width: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::randn(&[rows, width], 1.0, rng);
    for r in 0..rows {
        let row = &mut t.data_mut()[r * width..(r + 1) * width];
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Finite-difference cases for both training losses, on whole models.
pub fn loss_cases() -> Vec<GradCase> {
    use rand::Rng as _;
    vec![
        GradCase {
            name: "info_nce",
            make: |rng| {
                let b = rng.random_range(1..=3);
                let d = rng.random_range(2..=5);
                let kneg = rng.random_range(0..=6);
                let tau = [0.07, 0.2, 0.5][rng.random_range(0..3)];
                let neg = (kneg > 0).then(|| unit_rows(kneg, d, rng));
                Instance {
                    inputs: vec![Tensor::randn(&[b, d], 1.0, rng), Tensor::randn(&[b, d], 1.0, rng)],
                    f: Box::new(move |t, v| {
                        let q = t.l2_normalize(v[0]);
                        let k = t.l2_normalize(v[1]);
                        contrastive::info_nce(t, q, k, neg.as_ref(), tau)
                    }),
                }
            },
        },
        GradCase {
            name: "cnn_info_nce",
            make: |rng| {
                let enc = tiny_cnn();
                let params = enc.init(rng, true);
                let (names, inputs) = param_inputs(&params);
                let b = rng.random_range(1..=2);
                let x1 = Tensor::uniform(&[b, 2, 6, 6], 0.0, 1.0, rng);
                let x2 = Tensor::uniform(&[b, 2, 6, 6], 0.0, 1.0, rng);
                let neg = unit_rows(4, 3, rng);
                Instance {
                    inputs,
                    f: Box::new(move |t, v| {
                        let p = Bound::from_vars(names.iter().map(String::as_str), v)?;
                        let a = t.constant(x1.clone());
                        let q = enc.forward(t, &p, a, true)?;
                        let b = t.constant(x2.clone());
                        let k = enc.forward(t, &p, b, true)?;
                        contrastive::info_nce(t, q, k, Some(&neg), 0.2)
                    }),
                }
            },
        },
        GradCase {
            name: "vit_mae_loss",
            make: |rng| {
                let model = tiny_vit();
                let params = model.init(rng);
                let (names, inputs) = param_inputs(&params);
                let b = rng.random_range(1..=2);
                let images = Tensor::uniform(&[b, 1, 4, 4], 0.0, 1.0, rng);
                let plans: Vec<mae::MaskPlan> = (0..b).map(|_| mae::make_mask(4, 0.5, rng).expect("valid mask")).collect();
                let scope = if rng.random_bool(0.5) { mae::LossScope::Full } else { mae::LossScope::Masked };
                Instance {
                    inputs,
                    f: Box::new(move |t, v| {
                        let p = Bound::from_vars(names.iter().map(String::as_str), v)?;
                        Ok(mae::mae_loss(&model, t, &p, &images, &plans, scope)?.loss)
                    }),
                }
            },
        },
    ]
}

/// Every primitive op case followed by the loss cases.
pub fn all_grad_cases() -> Vec<GradCase> {
    let mut v = crate::tensor::gradcheck::op_cases();
    v.extend(loss_cases());
    v
}
