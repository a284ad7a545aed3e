//! Classification metrics and supervised fine-tuning on top of a pretrained
//! encoder.

use serde::{Deserialize, Serialize};

use crate::data::{self, Partition, Split};
use crate::error::{Error, Result};
use crate::federation::{self, SyncSet};
use crate::mae::epoch_batches;
use crate::nets::vit::patchify;
use crate::nets::{Bound, ClassifierHead, CnnEncoder, MaeModel, ParamSet};
use crate::rng;
use crate::tensor::{Optimizer, Tape, Tensor, Var};

/// Metrics of one evaluation. Per-class vectors are indexed by class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub specificity: Vec<f64>,
    pub f1: Vec<f64>,
    /// Balanced multiclass accuracy.
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub macro_specificity: f64,
    /// One-vs-rest AUC averaged over classes that are present and absent in
    /// the labels; `None` when no class qualifies or no scores were given.
    pub macro_auc: Option<f64>,
    pub accuracy: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
    /// Classes left out of the AUC average.
    pub auc_excluded: Vec<usize>,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Recall, precision, specificity and F1 per class from hard predictions.
pub fn confusion_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsRecord> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "confusion_metrics needs equal nonempty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::Index(format!("class {bad} out of range for {num_classes} classes")));
    }
    // cm[true][pred]
    let mut cm = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        cm[l][p] += 1;
    }
    let n = preds.len();
    let mut flag = false;
    let mut rec = Vec::with_capacity(num_classes);
    let mut prec = Vec::with_capacity(num_classes);
    let mut spec = Vec::with_capacity(num_classes);
    let mut f1 = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = cm[c][c];
        let actual: usize = cm[c].iter().sum();
        let predicted: usize = cm.iter().map(|row| row[c]).sum();
        let (fn_, fp) = (actual - tp, predicted - tp);
        let tn = n - tp - fn_ - fp;
        let r = ratio(tp, tp + fn_, &mut flag);
        let p = ratio(tp, tp + fp, &mut flag);
        rec.push(r);
        prec.push(p);
        spec.push(ratio(tn, tn + fp, &mut flag));
        f1.push(if r + p > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            flag = true;
            0.0
        });
    }
    let correct: usize = (0..num_classes).map(|c| cm[c][c]).sum();
    Ok(MetricsRecord {
        macro_recall: mean(&rec),
        macro_precision: mean(&prec),
        macro_f1: mean(&f1),
        macro_specificity: mean(&spec),
        recall: rec,
        precision: prec,
        specificity: spec,
        f1,
        macro_auc: None,
        accuracy: correct as f64 / n as f64,
        zero_division: flag,
        auc_excluded: Vec::new(),
    })
}

/// Per-class AUCs and their macro mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
    pub excluded: Vec<usize>,
}

/// One-vs-rest AUC from the Mann-Whitney rank statistic with midranks, so a
/// tie between a positive and a negative earns half credit.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUC for `scores (n, num_classes)`.
pub fn macro_auc(scores: &Tensor, labels: &[usize]) -> Result<AucReport> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("macro_auc", s, &[labels.len()]));
    }
    let k = s[1];
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = (0..labels.len()).map(|i| scores.data()[i * k + c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let a = binary_auc(&col, &pos);
        if a.is_none() {
            excluded.push(c);
        }
        per_class.push(a);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(AucReport {
        macro_auc: (!present.is_empty()).then(|| mean(&present)),
        per_class,
        excluded,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax probabilities of `(n, k)` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
    }
    out
}

/// Full metric record from logits.
pub fn evaluate_logits(logits: &Tensor, labels: &[usize]) -> Result<MetricsRecord> {
    let k = logits.shape()[1];
    let preds: Vec<usize> = logits.data().chunks(k).map(argmax).collect();
    let mut m = confusion_metrics(&preds, labels, k)?;
    let auc = macro_auc(&softmax(logits), labels)?;
    m.macro_auc = auc.macro_auc;
    m.auc_excluded = auc.excluded;
    Ok(m)
}

/// Uniform mean of several records; AUC averages the records that have one.
pub fn average_records(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    let first = records.first().ok_or_else(|| Error::contract("average of no metric records"))?;
    let n = records.len() as f64;
    let k = first.recall.len();
    let avg_vec = |f: fn(&MetricsRecord) -> &Vec<f64>| (0..k).map(|c| records.iter().map(|r| f(r)[c]).sum::<f64>() / n).collect();
    let avg = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = records.iter().filter_map(|r| r.macro_auc).collect();
    let mut excluded: Vec<usize> = records.iter().flat_map(|r| r.auc_excluded.iter().copied()).collect();
    excluded.sort_unstable();
    excluded.dedup();
    Ok(MetricsRecord {
        recall: avg_vec(|r| &r.recall),
        precision: avg_vec(|r| &r.precision),
        specificity: avg_vec(|r| &r.specificity),
        f1: avg_vec(|r| &r.f1),
        macro_recall: avg(|r| r.macro_recall),
        macro_precision: avg(|r| r.macro_precision),
        macro_f1: avg(|r| r.macro_f1),
        macro_specificity: avg(|r| r.macro_specificity),
        macro_auc: (!aucs.is_empty()).then(|| mean(&aucs)),
        accuracy: avg(|r| r.accuracy),
        zero_division: records.iter().any(|r| r.zero_division),
        auc_excluded: excluded,
    })
}

/// Encoder feeding the classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backbone {
    /// Pooled convolutional features.
    Cnn(CnnEncoder),
    /// Class-token state of the ViT encoder over all patches.
    Vit(MaeModel),
}

impl Backbone {
    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Cnn(e) => e.cfg.embed_dim(),
            Backbone::Vit(m) => m.cfg.embed_dim,
        }
    }

    pub fn is_encoder_param(&self, name: &str) -> bool {
        match self {
            Backbone::Cnn(_) => CnnEncoder::is_encoder_param(name),
            Backbone::Vit(_) => MaeModel::is_encoder_param(name),
        }
    }

    /// Fresh encoder parameters.
    pub fn init(&self, rng: &mut rng::Rng) -> ParamSet {
        match self {
            Backbone::Cnn(e) => e.init(rng, false),
            Backbone::Vit(m) => m.init_encoder(rng),
        }
    }

    pub fn features(&self, tape: &mut Tape, p: &Bound, images: &Tensor) -> Result<Var> {
        match self {
            Backbone::Cnn(e) => {
                let x = tape.constant(images.clone());
                e.features(tape, p, x)
            }
            Backbone::Vit(m) => {
                let patches = patchify(images, m.cfg.patch)?;
                let (b, n, pd) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
                let x = tape.constant(patches.reshape(&[b * n, pd])?);
                let enc = m.encode_full(tape, p, x, b)?;
                m.class_states(tape, &enc)
            }
        }
    }
}

/// Builds the supervised model: encoder parameters taken from `pretrained`
/// (other names such as decoders and projection heads are dropped) plus a
/// classifier head.
pub fn supervised_params(backbone: &Backbone, pretrained: &ParamSet, num_classes: usize, zero_head: bool, rng: &mut rng::Rng) -> Result<ParamSet> {
    let reference = backbone.init(&mut rng::named(0, "schema"));
    let mut p = ParamSet::new();
    for (name, t) in reference.iter() {
        let src = pretrained.tensor(name)?;
        if src.shape() != t.shape() {
            return Err(Error::Schema(name.to_string()));
        }
        p.insert(name, src.clone());
    }
    let head = ClassifierHead {
        feature_dim: backbone.feature_dim(),
        num_classes,
    };
    if zero_head {
        head.init_zero(&mut p);
    } else {
        head.init(&mut p, rng);
    }
    Ok(p)
}

pub fn logits(backbone: &Backbone, params: &ParamSet, images: &Tensor, num_classes: usize) -> Result<Tensor> {
    let mut out = Vec::new();
    let n = images.shape()[0];
    let head = ClassifierHead {
        feature_dim: backbone.feature_dim(),
        num_classes,
    };
    // Chunked so the tape stays small.
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let batch = crate::mae::gather(images, &idx);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let f = backbone.features(&mut tape, &p, &batch)?;
        let z = head.forward(&mut tape, &p, f)?;
        out.extend_from_slice(tape.value(z).data());
    }
    Tensor::new(vec![n, num_classes], out)
}

pub fn evaluate(backbone: &Backbone, params: &ParamSet, split: &Split, num_classes: usize) -> Result<MetricsRecord> {
    let z = logits(backbone, params, &split.images, num_classes)?;
    evaluate_logits(&z, &split.labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FinetuneMode {
    Local,
    Federated,
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::Local => "local",
            FinetuneMode::Federated => "federated",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "local" => Some(FinetuneMode::Local),
            "federated" => Some(FinetuneMode::Federated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub label_fraction: f64,
    /// Local mode: epochs per client. Federated mode: local epochs per round.
    pub epochs: usize,
    /// Federated mode only.
    pub rounds: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub freeze_encoder: bool,
    pub zero_head: bool,
    pub uniform_avg: bool,
    pub augment: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::Federated,
            label_fraction: 0.1,
            epochs: 5,
            rounds: 40,
            lr: 0.01,
            weight_decay: 0.0,
            batch: 16,
            freeze_encoder: false,
            zero_head: false,
            uniform_avg: false,
            augment: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Federated: the global model. Local: one model per client.
    pub models: Vec<ParamSet>,
    pub metrics: MetricsRecord,
    /// Accuracy on the labeled training samples, averaged like `metrics`.
    pub train_accuracy: f64,
    /// Set when some client's label mask could not be stratified.
    pub unstratified: bool,
}

struct Labeled {
    images: Tensor,
    labels: Vec<usize>,
}

fn labeled_subsets(part: &Partition, cfg: &FinetuneConfig, seed: u64) -> Result<(Vec<Labeled>, bool)> {
    let mut flag = false;
    let mut out = Vec::with_capacity(part.clients.len());
    for c in &part.clients {
        let mut r = rng::stream(seed, "labels", c.id as u64, 0);
        let m = data::label_mask(&c.train.labels, part.spec.num_classes, cfg.label_fraction, &mut r)?;
        flag |= m.unstratified;
        out.push(Labeled {
            images: c.train.batch(&m.labeled),
            labels: c.train.labels_of(&m.labeled),
        });
    }
    Ok((out, flag))
}

/// `epochs` passes of cross-entropy training on one labeled set.
#[allow(clippy::too_many_arguments)]
fn train_supervised(backbone: &Backbone, params: &mut ParamSet, set: &Labeled, num_classes: usize, cfg: &FinetuneConfig, rng: &mut rng::Rng) -> Result<()> {
    let head = ClassifierHead {
        feature_dim: backbone.feature_dim(),
        num_classes,
    };
    let mut opt = Optimizer::adam(cfg.lr).with_weight_decay(cfg.weight_decay);
    let aug = data::AugmentConfig::mae();
    let freeze = cfg.freeze_encoder;
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(set.labels.len(), cfg.batch, rng) {
            let mut batch = crate::mae::gather(&set.images, &idx);
            if cfg.augment {
                batch = data::augment_batch(&batch, &aug, rng);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let f = backbone.features(&mut tape, &p, &batch)?;
            let z = head.forward(&mut tape, &p, f)?;
            let loss = tape.cross_entropy(z, &labels)?;
            tape.backward(loss)?;
            let mut g = p.grads(&tape);
            g.fill_missing(params);
            opt.step_filtered(params, &g, |n| !(freeze && backbone.is_encoder_param(n)))?;
        }
    }
    Ok(())
}

fn train_accuracy(backbone: &Backbone, params: &ParamSet, set: &Labeled, num_classes: usize) -> Result<f64> {
    if set.labels.is_empty() {
        return Ok(0.0);
    }
    let z = logits(backbone, params, &set.images, num_classes)?;
    let preds: Vec<usize> = z.data().chunks(num_classes).map(argmax).collect();
    Ok(preds.iter().zip(&set.labels).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

/// Supervised fine-tuning on the labeled fraction of every client's training
/// split.
///
/// Local mode trains each client independently and averages per-device test
/// metrics. Federated mode averages encoder and head every round and reports
/// metrics of the global model on the pooled test set.
pub fn finetune(backbone: &Backbone, init: &ParamSet, part: &Partition, cfg: &FinetuneConfig, seed: u64, workers: usize) -> Result<FinetuneOutcome> {
    let k = part.spec.num_classes;
    let (sets, unstratified) = labeled_subsets(part, cfg, seed)?;
    let base = supervised_params(backbone, init, k, cfg.zero_head, &mut rng::named(seed, "finetune"))?;
    match cfg.mode {
        FinetuneMode::Local => {
            let results = federation::map_clients(workers, part.clients.len(), |i| {
                let c = &part.clients[i];
                let mut p = base.clone();
                let mut r = rng::stream(seed, "finetune", c.id as u64, 0);
                train_supervised(backbone, &mut p, &sets[i], k, cfg, &mut r)?;
                let m = evaluate(backbone, &p, &c.test, k)?;
                let acc = train_accuracy(backbone, &p, &sets[i], k)?;
                Ok((p, m, acc))
            })?;
            let records: Vec<MetricsRecord> = results.iter().map(|r| r.1.clone()).collect();
            let acc = results.iter().map(|r| r.2).sum::<f64>() / results.len() as f64;
            Ok(FinetuneOutcome {
                metrics: average_records(&records)?,
                models: results.into_iter().map(|r| r.0).collect(),
                train_accuracy: acc,
                unstratified,
            })
        }
        FinetuneMode::Federated => {
            let mut global = base;
            for round in 0..cfg.rounds {
                let locals = federation::map_clients(workers, part.clients.len(), |i| {
                    let c = &part.clients[i];
                    let mut p = global.clone();
                    let mut r = rng::stream(seed, "finetune", c.id as u64, round as u64 + 1);
                    if !sets[i].labels.is_empty() {
                        train_supervised(backbone, &mut p, &sets[i], k, cfg, &mut r)?;
                    }
                    Ok(p)
                })?;
                let entries: Vec<federation::ClientUpdate<'_>> = locals
                    .iter()
                    .zip(part.clients.iter().zip(&sets))
                    .filter(|(_, (_, s))| !s.labels.is_empty())
                    .map(|(p, (c, s))| federation::ClientUpdate {
                        client: c.id,
                        params: p,
                        size: s.labels.len() as f64,
                    })
                    .collect();
                if entries.is_empty() {
                    return Err(Error::contract("no client has labeled samples"));
                }
                global = federation::fedavg(&global, &entries, &SyncSet::EncoderPlusDecoder.resolve(&global), cfg.uniform_avg)?;
            }
            let pooled = Split::concat(part.clients.iter().map(|c| &c.test))?;
            let metrics = evaluate(backbone, &global, &pooled, k)?;
            let mut accs = Vec::new();
            for set in sets.iter().filter(|s| !s.labels.is_empty()) {
                accs.push(train_accuracy(backbone, &global, set, k)?);
            }
            let acc = accs.iter().sum::<f64>() / accs.len() as f64;
            Ok(FinetuneOutcome {
                models: vec![global],
                metrics,
                train_accuracy: acc,
                unstratified,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = vec![0, 1, 2, 1, 0];
        let m = confusion_metrics(&y, &y, 3).unwrap();
        assert_eq!(m.macro_recall, 1.0);
        assert_eq!(m.macro_precision, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
        assert!(m.specificity.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn binary_hand_case() {
        let m = confusion_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
        assert_eq!(m.recall, vec![0.5, 0.5]);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn empty_input_is_contract_error() {
        assert!(matches!(confusion_metrics(&[], &[], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_denominator_flagged() {
        let m = confusion_metrics(&[0, 0], &[0, 0], 2).unwrap();
        assert!(m.zero_division);
        assert_eq!(m.recall[1], 0.0);
    }

    #[test]
    fn auc_trivial_cases() {
        let labels = vec![0, 0, 1, 1];
        let good = Tensor::new(vec![4, 2], vec![0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9]).unwrap();
        assert_eq!(macro_auc(&good, &labels).unwrap().macro_auc, Some(1.0));
        let bad = Tensor::new(vec![4, 2], vec![0.1, 0.9, 0.2, 0.8, 0.7, 0.3, 0.9, 0.1]).unwrap();
        assert_eq!(macro_auc(&bad, &labels).unwrap().macro_auc, Some(0.0));
        let flat = Tensor::full(&[4, 2], 0.5);
        assert_eq!(macro_auc(&flat, &labels).unwrap().macro_auc, Some(0.5));
    }

    #[test]
    fn auc_excludes_absent_class() {
        let s = Tensor::new(vec![2, 3], vec![0.9, 0.1, 0.0, 0.1, 0.9, 0.0]).unwrap();
        let r = macro_auc(&s, &[0, 1]).unwrap();
        assert_eq!(r.excluded, vec![2]);
        assert_eq!(r.macro_auc, Some(1.0));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
    }
}
