//! Round-based federated training.
//!
//! The server owns the global [`ParamSet`]; clients train copies and send them
//! back. Every exchange goes through a serialization round trip ([`transmit`])
//! so that nothing but bytes crosses the client/server boundary. Client work
//! within a round can run on a thread pool; results are reduced in client-id
//! order so the outcome does not depend on scheduling.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{self, ClClient, ClConfig, EntryTag, FeatureBank, NegativeAudit, RemoteBank};
use crate::digest;
use crate::error::{Error, Result};
use crate::mae::{self, epoch_batches, LocalStreams, MaeTrainConfig};
use crate::nets::checkpoint;
use crate::nets::{CnnEncoder, KnowledgeTag, MaeModel, ParamSet};
use crate::rng;
use crate::tensor::{CosineSchedule, Optimizer, OptimizerKind, Tensor};

/// Which parameters are aggregated every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SyncSet {
    EncoderPlusDecoder,
    WoDecoder,
    WoLinearProjection,
    WoDecoderProjection,
    WoClassToken,
}

impl SyncSet {
    pub const ALL: [SyncSet; 5] = [
        SyncSet::EncoderPlusDecoder,
        SyncSet::WoDecoder,
        SyncSet::WoLinearProjection,
        SyncSet::WoDecoderProjection,
        SyncSet::WoClassToken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyncSet::EncoderPlusDecoder => "encoder_plus_decoder",
            SyncSet::WoDecoder => "wo_decoder",
            SyncSet::WoLinearProjection => "wo_linear_projection",
            SyncSet::WoDecoderProjection => "wo_decoder_projection",
            SyncSet::WoClassToken => "wo_class_token",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Row label of the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            SyncSet::EncoderPlusDecoder => "Encoder+Decoder",
            SyncSet::WoDecoder => "W/o Decoder",
            SyncSet::WoLinearProjection => "W/o Linear Projection",
            SyncSet::WoDecoderProjection => "W/o Decoder Projection",
            SyncSet::WoClassToken => "W/o Class Token",
        }
    }

    /// True when `name` is kept local under this variant.
    pub fn is_local(self, name: &str) -> bool {
        match self {
            SyncSet::EncoderPlusDecoder => false,
            SyncSet::WoDecoder => name.starts_with("decoder."),
            SyncSet::WoLinearProjection => name.starts_with("encoder.patch_embed."),
            SyncSet::WoDecoderProjection => name.starts_with("decoder.embed."),
            SyncSet::WoClassToken => name == MaeModel::CLASS_TOKEN,
        }
    }

    /// Names aggregated every round, in model order.
    pub fn resolve(self, params: &ParamSet) -> Vec<String> {
        params.names().filter(|n| !self.is_local(n)).map(str::to_string).collect()
    }

    /// Names kept local, in model order.
    pub fn local_names(self, params: &ParamSet) -> Vec<String> {
        params.names().filter(|n| self.is_local(n)).map(str::to_string).collect()
    }

    /// Tags every parameter of `params` global or local.
    pub fn apply_tags(self, params: &mut ParamSet) {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for n in names {
            let tag = if self.is_local(&n) { KnowledgeTag::Local } else { KnowledgeTag::Global };
            params.set_tag(&n, tag).expect("name from the same set");
        }
    }
}

/// One client's contribution to an aggregation.
#[derive(Debug, Clone, Copy)]
pub struct ClientUpdate<'a> {
    pub client: u32,
    pub params: &'a ParamSet,
    /// Local dataset size `|D_c|`.
    pub size: f64,
}

/// Weighted average of client parameters over `names`.
///
/// Clients are sorted by id and reduced as `θ₁ + Σ_c w_c (θ_c − θ₁)` with
/// `w_c = |D_c| / Σ|D|` (or `1/n` when `uniform`), so identical clients
/// reproduce their parameters bitwise and the result does not depend on the
/// order updates are passed in. Names not listed keep the value in
/// `reference`.
pub fn fedavg(reference: &ParamSet, updates: &[ClientUpdate<'_>], names: &[String], uniform: bool) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::contract("fedavg over zero clients"));
    }
    let mut sorted: Vec<&ClientUpdate<'_>> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    for w in sorted.windows(2) {
        if w[0].client == w[1].client {
            return Err(Error::contract(format!("client {} appears twice", w[0].client)));
        }
    }
    for u in &sorted {
        if !(u.size > 0.0) || !u.size.is_finite() {
            return Err(Error::contract(format!("client {} has size {}", u.client, u.size)));
        }
    }
    for name in names {
        let want = reference.tensor(name)?.shape();
        for u in &sorted {
            let t = u.params.get(name).ok_or_else(|| Error::Schema(name.clone()))?;
            if t.shape() != want {
                return Err(Error::Schema(name.clone()));
            }
        }
    }
    let total: f64 = sorted.iter().map(|u| u.size).sum();
    let weights: Vec<f64> = sorted
        .iter()
        .map(|u| if uniform { 1.0 / sorted.len() as f64 } else { u.size / total })
        .collect();
    let mut out = reference.clone();
    for name in names {
        let base = sorted[0].params.get(name).expect("checked").data();
        let mut acc = base.to_vec();
        for (u, &w) in sorted.iter().zip(&weights).skip(1) {
            let t = u.params.get(name).expect("checked").data();
            for ((a, &v), &b0) in acc.iter_mut().zip(t).zip(base) {
                *a += w * (v - b0);
            }
        }
        out.get_mut(name).expect("checked").data_mut().copy_from_slice(&acc);
    }
    Ok(out)
}

/// Serialization round trip of a parameter set. Tags are restored from the
/// source since the wire format does not carry them.
pub fn transmit(params: &ParamSet) -> Result<ParamSet> {
    let mut out = checkpoint::decode(&checkpoint::encode(params))?;
    for (name, _) in params.iter() {
        out.set_tag(name, params.tag(name).unwrap_or_default())?;
    }
    Ok(out)
}

/// Subset of `params` restricted to `names`.
pub fn subset(params: &ParamSet, names: &[String]) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for n in names {
        out.insert(n.clone(), params.tensor(n)?.clone());
    }
    Ok(out)
}

pub fn transmit_bank(bank: &FeatureBank, tag: EntryTag) -> Result<FeatureBank> {
    FeatureBank::decode(&bank.encode(), bank.capacity(), tag)
}

/// Runs `f(0..n)` on up to `workers` threads; results are in index order and
/// the first failing index wins.
pub fn map_clients<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..n).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}

/// One transcript event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub round: u64,
    pub event: String,
    pub client: Option<u32>,
    /// FNV-1a 64 of the payload, hex.
    pub digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub records: Vec<TranscriptRecord>,
}

impl Transcript {
    pub fn push(&mut self, round: u64, event: &str, client: Option<u32>, digest: u64) {
        self.records.push(TranscriptRecord {
            round,
            event: event.to_string(),
            client,
            digest: digest::hex(digest),
        });
    }

    pub fn round(&self, round: u64) -> impl Iterator<Item = &TranscriptRecord> {
        self.records.iter().filter(move |r| r.round == round)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format("transcript", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Transcript { records })
    }
}

/// Per-round summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    /// Mean training loss per client, by id.
    pub losses: Vec<(u32, f64)>,
    /// Contrastive runs: negatives seen during the round, summed over clients.
    pub audit: NegativeAudit,
    /// Contrastive runs: remote-bank entries produced by their recipient,
    /// counted on the server side over every construction. Always 0.
    pub remote_self_entries: u64,
    /// Contrastive runs: remote-bank size per client.
    pub remote_sizes: Vec<usize>,
    pub global_digest: u64,
}

impl RoundReport {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().map(|l| l.1).sum::<f64>() / self.losses.len().max(1) as f64
    }
}

/// How the momentum model is handled at the start of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyncMomentum {
    /// Reset to the aggregated main model.
    Reset,
    /// Keep the client's own momentum model.
    Keep,
}

impl SyncMomentum {
    pub fn name(self) -> &'static str {
        match self {
            SyncMomentum::Reset => "reset",
            SyncMomentum::Keep => "keep",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "reset" => Some(SyncMomentum::Reset),
            "keep" => Some(SyncMomentum::Keep),
            _ => None,
        }
    }
}

/// Optimizer settings shared by both protocols.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
}

impl OptimSettings {
    pub fn build(&self) -> Optimizer {
        Optimizer::new(self.kind, self.lr).with_weight_decay(self.weight_decay)
    }
}

/// Settings of a contrastive federation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClfSettings {
    pub cl: ClConfig,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub optim: OptimSettings,
    pub sync_momentum: SyncMomentum,
    /// Re-encode every local bank with the round's starting momentum model
    /// before it is uploaded, so remote negatives are never a round stale.
    pub refresh_banks: bool,
    pub uniform_avg: bool,
    pub workers: usize,
    pub seed: u64,
}

impl Default for ClfSettings {
    fn default() -> Self {
        ClfSettings {
            cl: ClConfig::default(),
            rounds: 20,
            local_epochs: 1,
            batch: 16,
            optim: OptimSettings {
                kind: OptimizerKind::Sgd { momentum: 0.9 },
                lr: 0.03,
                weight_decay: 0.0,
            },
            sync_momentum: SyncMomentum::Reset,
            refresh_banks: true,
            uniform_avg: false,
            workers: 1,
            seed: 0,
        }
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch.max(1)) as u64
}

/// Replaces `Q_l` with momentum features of the client's last `k` images.
fn fill_bank(c: &mut ClClient, enc: &CnnEncoder, images: &Tensor, k: usize) -> Result<()> {
    let n = images.shape()[0];
    let idx: Vec<usize> = (n.saturating_sub(k)..n).collect();
    c.local_bank.clear();
    c.encode_local_features(enc, &mae::gather(images, &idx))?;
    Ok(())
}

/// Server and clients of a contrastive federation with feature sharing.
#[derive(Debug, Clone)]
pub struct FedClf {
    pub settings: ClfSettings,
    pub enc: CnnEncoder,
    pub global: ParamSet,
    pub clients: Vec<ClClient>,
    pub shards: Vec<Tensor>,
    /// Local banks as last uploaded, in client order.
    pub uploaded_banks: Vec<FeatureBank>,
    pub round: u64,
    pub transcript: Transcript,
    /// Test hook: make client `.1` fail in round `.0`.
    pub fail_at: Option<(u64, u32)>,
}

impl FedClf {
    /// Sets up clients from their training images and fills every local bank
    /// with momentum features of the client's own images so that remote
    /// banks exist from the first round.
    pub fn new(settings: ClfSettings, enc: CnnEncoder, init: ParamSet, shards: Vec<(u32, Tensor)>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::config("data.clients", "need at least one client"));
        }
        let width = enc.cfg.proj_dim;
        let k = settings.cl.bank_capacity;
        let mut transcript = Transcript::default();
        let mut clients = Vec::with_capacity(shards.len());
        let mut banks = Vec::with_capacity(shards.len());
        for (id, images) in &shards {
            let mut c = ClClient::new(*id, &init, width, k)?;
            fill_bank(&mut c, &enc, images, k)?;
            let up = transmit_bank(&c.local_bank, EntryTag::Local)?;
            transcript.push(0, "upload_bank", Some(*id), digest::fnv1a(&up.encode()));
            banks.push(up);
            clients.push(c);
        }
        Ok(FedClf {
            settings,
            enc,
            global: init,
            clients,
            shards: shards.into_iter().map(|s| s.1).collect(),
            uploaded_banks: banks,
            round: 0,
            transcript,
            fail_at: None,
        })
    }

    fn remote_for(&self, i: usize, t: u64) -> Result<(RemoteBank, u64)> {
        let me = self.clients[i].id;
        let others: Vec<(u32, &FeatureBank)> = self
            .clients
            .iter()
            .zip(&self.uploaded_banks)
            .filter(|(c, _)| c.id != me)
            .map(|(c, b)| (c.id, b))
            .collect();
        let mut r = rng::stream(self.settings.seed, "server", me as u64, t);
        let rb = if others.is_empty() {
            RemoteBank {
                payload: FeatureBank::new(1, self.enc.cfg.proj_dim)?,
                retained: Default::default(),
            }
        } else {
            contrastive::build_remote_bank(&others, me, &mut r)?
        };
        let self_entries = rb.retained.iter().filter(|&&o| o == me).count() as u64;
        let payload = transmit_bank(&rb.payload, EntryTag::Remote)?;
        Ok((
            RemoteBank {
                payload,
                retained: rb.retained,
            },
            self_entries,
        ))
    }

    /// Runs one full round: distribute, local training, upload, aggregate.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.round;
        let s = self.settings;
        let global_msg = transmit(&self.global)?;
        let gd = global_msg.digest();
        let mut report = RoundReport {
            round: t,
            ..Default::default()
        };
        for c in &self.clients {
            self.transcript.push(t, "distribute", Some(c.id), gd);
        }
        if s.refresh_banks && t > 0 {
            self.refresh_banks(&global_msg)?;
        }
        let mut remotes = Vec::with_capacity(self.clients.len());
        for i in 0..self.clients.len() {
            if s.cl.mode.uses_remote() {
                let (rb, self_entries) = self.remote_for(i, t)?;
                report.remote_self_entries += self_entries;
                report.remote_sizes.push(rb.payload.len());
                self.transcript.push(t, "remote_bank", Some(self.clients[i].id), digest::fnv1a(&rb.payload.encode()));
                remotes.push(Some(rb));
            } else {
                remotes.push(None);
            }
        }
        let total_steps = s.rounds as u64 * s.local_epochs as u64;
        let clients = &self.clients;
        let shards = &self.shards;
        let enc = self.enc;
        let fail_at = self.fail_at;
        let trained = map_clients(s.workers, clients.len(), |i| {
            let mut c = clients[i].clone();
            let id = c.id;
            let wrap = |e: Error| Error::Client {
                client: id,
                round: t,
                source: Box::new(e),
            };
            if fail_at == Some((t, id)) {
                return Err(wrap(Error::contract("injected failure")));
            }
            c.main = global_msg.clone();
            if s.sync_momentum == SyncMomentum::Reset {
                c.momentum = global_msg.clone();
            }
            c.remote = remotes[i].clone();
            c.audit = NegativeAudit::default();
            c.start_round(&s.cl).map_err(wrap)?;
            let images = &shards[i];
            let n = images.shape()[0];
            let per_round = steps_per_epoch(n, s.batch);
            let schedule = CosineSchedule::new(s.optim.lr, total_steps * per_round);
            let mut step = t * s.local_epochs as u64 * per_round;
            let mut opt = s.optim.build();
            let mut shuffle = rng::stream(s.seed, "shuffle", id as u64, t);
            let mut augment = rng::stream(s.seed, "augment", id as u64, t);
            let mut sampling = rng::stream(s.seed, "sampling", id as u64, t);
            let mut losses = Vec::new();
            for _ in 0..s.local_epochs {
                for idx in epoch_batches(n, s.batch, &mut shuffle) {
                    opt.lr = schedule.at(step);
                    let batch = mae::gather(images, &idx);
                    let l = c.step(&enc, &batch, &s.cl, &mut opt, &mut augment, &mut sampling).map_err(wrap)?;
                    losses.push(l);
                    step += 1;
                }
            }
            let up = transmit(&c.main).map_err(wrap)?;
            let bank = transmit_bank(&c.local_bank, EntryTag::Local).map_err(wrap)?;
            let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            Ok((c, up, bank, mean))
        })?;
        for (c, up, bank, _) in &trained {
            self.transcript.push(t, "upload_params", Some(c.id), up.digest());
            self.transcript.push(t, "upload_bank", Some(c.id), digest::fnv1a(&bank.encode()));
        }
        let updates: Vec<ClientUpdate<'_>> = trained
            .iter()
            .zip(&self.shards)
            .map(|((c, up, _, _), sh)| ClientUpdate {
                client: c.id,
                params: up,
                size: sh.shape()[0] as f64,
            })
            .collect();
        let names: Vec<String> = self.global.names().map(str::to_string).collect();
        let global = fedavg(&self.global, &updates, &names, s.uniform_avg)?;
        drop(updates);
        self.global = global;
        report.global_digest = self.global.digest();
        self.transcript.push(t, "aggregate", None, report.global_digest);
        let mut clients = Vec::with_capacity(trained.len());
        let mut banks = Vec::with_capacity(trained.len());
        for (c, _, bank, mean) in trained {
            report.losses.push((c.id, mean));
            report.audit.merge(&c.audit);
            clients.push(c);
            banks.push(bank);
        }
        self.clients = clients;
        self.uploaded_banks = banks;
        self.round += 1;
        Ok(report)
    }

    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        (self.round as usize..self.settings.rounds).map(|_| self.run_round()).collect()
    }

    /// Clients re-encode their banks with the model they start the round
    /// from and upload them again.
    fn refresh_banks(&mut self, global: &ParamSet) -> Result<()> {
        let s = self.settings;
        let (enc, shards, clients, t) = (self.enc, &self.shards, &self.clients, self.round);
        let fresh = map_clients(s.workers, clients.len(), |i| {
            let mut c = clients[i].clone();
            if s.sync_momentum == SyncMomentum::Reset {
                c.momentum = global.clone();
            }
            let id = c.id;
            fill_bank(&mut c, &enc, &shards[i], s.cl.bank_capacity).map_err(|e| Error::Client {
                client: id,
                round: t,
                source: Box::new(e),
            })?;
            let up = transmit_bank(&c.local_bank, EntryTag::Local)?;
            Ok((c.local_bank, up))
        })?;
        for (i, (local, up)) in fresh.into_iter().enumerate() {
            self.transcript.push(t, "upload_bank", Some(self.clients[i].id), digest::fnv1a(&up.encode()));
            self.clients[i].local_bank = local;
            self.uploaded_banks[i] = up;
        }
        Ok(())
    }
}

/// Settings of a masked-autoencoder federation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeSettings {
    pub train: MaeTrainConfig,
    pub rounds: usize,
    pub local_epochs: usize,
    pub optim: OptimSettings,
    pub sync: SyncSet,
    pub uniform_avg: bool,
    /// Aggregate the local names once after the final round.
    pub final_aggregate: bool,
    pub workers: usize,
    pub seed: u64,
}

impl Default for MaeSettings {
    fn default() -> Self {
        MaeSettings {
            train: MaeTrainConfig::default(),
            rounds: 10,
            local_epochs: 10,
            optim: OptimSettings {
                kind: OptimizerKind::adam(),
                lr: 1e-3,
                weight_decay: 0.0,
            },
            sync: SyncSet::WoClassToken,
            uniform_avg: false,
            final_aggregate: true,
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaeClient {
    pub id: u32,
    pub params: ParamSet,
    pub images: Tensor,
}

/// Server and clients of a masked-autoencoder federation with a
/// global/local parameter split.
#[derive(Debug, Clone)]
pub struct FedMae {
    pub settings: MaeSettings,
    pub model: MaeModel,
    pub global: ParamSet,
    pub clients: Vec<MaeClient>,
    pub round: u64,
    pub transcript: Transcript,
    pub fail_at: Option<(u64, u32)>,
}

impl FedMae {
    pub fn new(settings: MaeSettings, model: MaeModel, mut init: ParamSet, shards: Vec<(u32, Tensor)>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::config("data.clients", "need at least one client"));
        }
        settings.sync.apply_tags(&mut init);
        let clients = shards
            .into_iter()
            .map(|(id, images)| MaeClient {
                id,
                params: init.clone(),
                images,
            })
            .collect();
        Ok(FedMae {
            settings,
            model,
            global: init,
            clients,
            round: 0,
            transcript: Transcript::default(),
            fail_at: None,
        })
    }

    pub fn sync_names(&self) -> Vec<String> {
        self.settings.sync.resolve(&self.global)
    }

    pub fn local_names(&self) -> Vec<String> {
        self.settings.sync.local_names(&self.global)
    }

    /// Sends the synchronized parameters to every client. Local names on the
    /// clients are not touched.
    pub fn distribute(&mut self) -> Result<()> {
        let names = self.sync_names();
        let msg = transmit(&subset(&self.global, &names)?)?;
        let d = msg.digest();
        for c in &mut self.clients {
            c.params.copy_from(&msg, names.iter().map(String::as_str))?;
            self.transcript.push(self.round, "distribute", Some(c.id), d);
        }
        Ok(())
    }

    /// Local training on every client. Returns mean loss per client.
    pub fn train_clients(&mut self) -> Result<Vec<(u32, f64)>> {
        let t = self.round;
        let s = self.settings;
        let model = self.model;
        let fail_at = self.fail_at;
        let total_epochs = s.rounds as u64 * s.local_epochs as u64;
        let clients = &self.clients;
        let trained = map_clients(s.workers, clients.len(), |i| {
            let mut c = clients[i].clone();
            let id = c.id;
            let wrap = |e: Error| Error::Client {
                client: id,
                round: t,
                source: Box::new(e),
            };
            if fail_at == Some((t, id)) {
                return Err(wrap(Error::contract("injected failure")));
            }
            let per_epoch = steps_per_epoch(c.images.shape()[0], s.train.batch);
            let schedule = CosineSchedule::new(s.optim.lr, total_epochs * per_epoch);
            let mut step = t * s.local_epochs as u64 * per_epoch;
            let mut opt = s.optim.build();
            let mut rngs = LocalStreams {
                shuffle: rng::stream(s.seed, "shuffle", id as u64, t),
                augment: rng::stream(s.seed, "augment", id as u64, t),
                masks: rng::stream(s.seed, "masks", id as u64, t),
            };
            let trace = mae::mae_local_epochs(&model, &mut c.params, &c.images, s.local_epochs, &s.train, &mut opt, &schedule, &mut step, &mut rngs)
                .map_err(wrap)?;
            let mean = trace.iter().sum::<f64>() / trace.len().max(1) as f64;
            Ok((c, mean))
        })?;
        let mut losses = Vec::with_capacity(trained.len());
        let mut clients = Vec::with_capacity(trained.len());
        for (c, l) in trained {
            losses.push((c.id, l));
            clients.push(c);
        }
        self.clients = clients;
        Ok(losses)
    }

    /// Uploads the synchronized parameters and averages them. After the
    /// final round the local names are averaged once as well.
    pub fn aggregate(&mut self) -> Result<()> {
        let t = self.round;
        let s = self.settings;
        let names = self.sync_names();
        let ups = self
            .clients
            .iter()
            .map(|c| transmit(&subset(&c.params, &names)?))
            .collect::<Result<Vec<_>>>()?;
        for (c, up) in self.clients.iter().zip(&ups) {
            self.transcript.push(t, "upload_params", Some(c.id), up.digest());
            if let Some(cls) = c.params.get(MaeModel::CLASS_TOKEN) {
                self.transcript.push(t, "class_token", Some(c.id), digest::fnv1a_f64s(cls.data()));
            }
        }
        let updates: Vec<ClientUpdate<'_>> = self
            .clients
            .iter()
            .zip(&ups)
            .map(|(c, up)| ClientUpdate {
                client: c.id,
                params: up,
                size: c.images.shape()[0] as f64,
            })
            .collect();
        let mut global = fedavg(&self.global, &updates, &names, s.uniform_avg)?;
        let last = t + 1 == s.rounds as u64;
        let local = self.local_names();
        if last && s.final_aggregate && !local.is_empty() {
            let locals = self
                .clients
                .iter()
                .map(|c| transmit(&subset(&c.params, &local)?))
                .collect::<Result<Vec<_>>>()?;
            let updates: Vec<ClientUpdate<'_>> = self
                .clients
                .iter()
                .zip(&locals)
                .map(|(c, up)| ClientUpdate {
                    client: c.id,
                    params: up,
                    size: c.images.shape()[0] as f64,
                })
                .collect();
            global = fedavg(&global, &updates, &local, s.uniform_avg)?;
            self.transcript.push(t, "final_local_aggregate", None, global.digest_of(local.iter().map(String::as_str)));
        }
        self.global = global;
        self.transcript.push(t, "aggregate", None, self.global.digest());
        Ok(())
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.round;
        self.distribute()?;
        let losses = self.train_clients()?;
        self.aggregate()?;
        self.round += 1;
        Ok(RoundReport {
            round: t,
            losses,
            global_digest: self.global.digest(),
            ..Default::default()
        })
    }

    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        (self.round as usize..self.settings.rounds).map(|_| self.run_round()).collect()
    }
}
