//! Momentum-contrast training with local and remote feature banks.
//!
//! A client keeps a main model (trained) and a momentum model (an EMA of the
//! main model). Momentum features of local images fill the local bank `Q_l`.
//! The server pools every other client's `Q_l` into a remote bank `Q_r`,
//! shuffles it and strips client ids before sending it on. Negatives for the
//! loss come from `Q_CL`, a FIFO that is refreshed every step from local
//! and/or remote features depending on [`BankMode`].

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::nets::checkpoint::Reader;
use crate::nets::{CnnEncoder, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Optimizer, Tape, Tensor, Var};

/// Unit-norm tolerance for stored features.
pub const UNIT_TOL: f64 = 1e-6;

/// Where a bank entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    /// Produced by the named client's momentum model.
    Client(u32),
    /// Entry `j` of a de-identified remote bank; only the server can map it
    /// back to a client.
    Anonymous(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryTag {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub feature: Vec<f64>,
    pub origin: Origin,
    pub tag: EntryTag,
}

/// Fixed-capacity FIFO of unit-norm feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    capacity: usize,
    width: usize,
    entries: VecDeque<BankEntry>,
}

impl FeatureBank {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::contract(format!("bank capacity {capacity} and width {width} must be positive")));
        }
        Ok(FeatureBank {
            capacity,
            width,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &BankEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&BankEntry> {
        self.entries.get(i)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends one entry, evicting the oldest when full.
    pub fn push(&mut self, entry: BankEntry) -> Result<()> {
        if entry.feature.len() != self.width {
            return Err(Error::shape("bank_push", &[entry.feature.len()], &[self.width]));
        }
        let n = entry.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!("bank feature has norm {n}, expected 1")));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// Appends every row of a `(B, width)` matrix.
    pub fn push_rows(&mut self, rows: &Tensor, origin: Origin, tag: EntryTag) -> Result<()> {
        let s = rows.shape();
        if s.len() != 2 || s[1] != self.width {
            return Err(Error::shape("bank_push", s, &[0, self.width]));
        }
        for i in 0..s[0] {
            self.push(BankEntry {
                feature: rows.row(i).to_vec(),
                origin,
                tag,
            })?;
        }
        Ok(())
    }

    /// Features as an `(len, width)` matrix, oldest first.
    pub fn matrix(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flat_map(|e| e.feature.iter().copied()).collect();
        Some(Tensor::new(vec![self.entries.len(), self.width], data).expect("nonempty"))
    }

    /// A bank of capacity `capacity` holding the newest entries of `self`.
    pub fn tail(&self, capacity: usize) -> Result<FeatureBank> {
        let mut b = FeatureBank::new(capacity, self.width)?;
        let skip = self.len().saturating_sub(capacity);
        b.entries.extend(self.entries.iter().skip(skip).cloned());
        Ok(b)
    }

    /// Snapshot: `count u32, width u32`, then per entry `origin u32` and
    /// `width × f64`, little-endian. Anonymous entries are written with origin
    /// `u32::MAX`; their index is their position.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * (4 + 8 * self.width));
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for e in &self.entries {
            let o = match e.origin {
                Origin::Client(c) => c,
                Origin::Anonymous(_) => ANONYMOUS,
            };
            out.extend_from_slice(&o.to_le_bytes());
            for v in &e.feature {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode). Entries are tagged `tag`; the
    /// capacity is `max(capacity, count)`.
    pub fn decode(bytes: &[u8], capacity: usize, tag: EntryTag) -> Result<FeatureBank> {
        let mut r = Reader::new(bytes, "feature bank");
        let count = r.u32()? as usize;
        let width = r.u32()? as usize;
        let mut b = FeatureBank::new(capacity.max(count).max(1), width.max(1))?;
        for j in 0..count {
            let o = r.u32()?;
            let origin = if o == ANONYMOUS {
                Origin::Anonymous(j as u32)
            } else {
                Origin::Client(o)
            };
            b.push(BankEntry {
                feature: r.f64s(width)?,
                origin,
                tag,
            })?;
        }
        r.finish()?;
        Ok(b)
    }
}

const ANONYMOUS: u32 = u32::MAX;

/// `θ_mom ← m·θ_mom + (1−m)·θ_main` for every parameter.
pub fn momentum_update(main: &ParamSet, momentum: &mut ParamSet, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::contract(format!("momentum coefficient {m} outside [0, 1)")));
    }
    main.check_schema(momentum)?;
    for ((_, t), (_, s)) in momentum.iter_mut().zip(main.iter()) {
        if m == 0.0 {
            t.data_mut().copy_from_slice(s.data());
        } else {
            for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
    }
    Ok(())
}

/// A de-identified remote bank as delivered to one client, together with the
/// origin table the server keeps back.
#[derive(Debug, Clone)]
pub struct RemoteBank {
    /// Shuffled entries with [`Origin::Anonymous`] ids.
    pub payload: FeatureBank,
    /// `retained[j]` is the client that produced payload entry `j`.
    pub retained: Arc<Vec<u32>>,
}

/// Builds `Q_r,i` from the local banks of the other clients.
///
/// `banks` must not contain `self_id`; passing it is a contract violation. The
/// union is shuffled with `rng` and client ids are replaced by anonymous
/// positions. Entry count is the sum of the input counts.
pub fn build_remote_bank(banks: &[(u32, &FeatureBank)], self_id: u32, rng: &mut Rng) -> Result<RemoteBank> {
    let width = banks.first().map(|(_, b)| b.width()).unwrap_or(1);
    let mut pooled: Vec<(u32, &BankEntry)> = Vec::new();
    for &(id, bank) in banks {
        if id == self_id {
            return Err(Error::contract(format!("remote bank for client {self_id} includes its own bank")));
        }
        if bank.width() != width {
            return Err(Error::shape("build_remote_bank", &[bank.width()], &[width]));
        }
        for e in bank.iter() {
            let origin = match e.origin {
                Origin::Client(c) => c,
                Origin::Anonymous(_) => id,
            };
            if origin == self_id {
                return Err(Error::contract(format!("bank of client {id} carries a feature of client {self_id}")));
            }
            pooled.push((origin, e));
        }
    }
    pooled.shuffle(rng);
    let mut payload = FeatureBank::new(pooled.len().max(1), width)?;
    let mut retained = Vec::with_capacity(pooled.len());
    for (j, (origin, e)) in pooled.into_iter().enumerate() {
        retained.push(origin);
        payload.push(BankEntry {
            feature: e.feature.clone(),
            origin: Origin::Anonymous(j as u32),
            tag: EntryTag::Remote,
        })?;
    }
    Ok(RemoteBank {
        payload,
        retained: Arc::new(retained),
    })
}

/// Draws `b` entries uniformly with replacement.
pub fn sample_remote<'a>(bank: &'a FeatureBank, b: usize, rng: &mut Rng) -> Result<Vec<&'a BankEntry>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    Ok((0..b).map(|_| &bank.entries[rng.random_range(0..bank.len())]).collect())
}

/// How `Q_CL` is initialized and refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BankMode {
    /// No feature exchange: `Q_CL` starts as `Q_l` and takes local features.
    LocalOnly,
    /// Starts as `Q_l`; each step enqueues local and sampled remote features.
    WithLocal,
    /// Starts as `Q_r`; each step enqueues sampled remote features only.
    RemoteOnly,
}

impl BankMode {
    pub fn name(self) -> &'static str {
        match self {
            BankMode::LocalOnly => "local_only",
            BankMode::WithLocal => "with_local",
            BankMode::RemoteOnly => "remote_only",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [BankMode::LocalOnly, BankMode::WithLocal, BankMode::RemoteOnly]
            .into_iter()
            .find(|m| m.name() == s)
    }

    pub fn uses_remote(self) -> bool {
        self != BankMode::LocalOnly
    }
}

/// Which momentum features enter the local bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BankSource {
    /// Reuse `k⁺`, the momentum features of the second augmented view.
    KPlus,
    /// Encode the un-augmented images with the updated momentum model.
    Clean,
}

impl BankSource {
    pub fn name(self) -> &'static str {
        match self {
            BankSource::KPlus => "kplus",
            BankSource::Clean => "clean",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "kplus" => Some(BankSource::KPlus),
            "clean" => Some(BankSource::Clean),
            _ => None,
        }
    }
}

/// Initial `Q_CL` for a round.
pub fn init_qcl(mode: BankMode, local: &FeatureBank, remote: Option<&FeatureBank>, capacity: usize) -> Result<FeatureBank> {
    match (mode, remote) {
        (BankMode::RemoteOnly, Some(r)) => r.tail(capacity),
        (BankMode::RemoteOnly, None) => Err(Error::EmptyBank),
        _ => local.tail(capacity),
    }
}

/// Enqueues `q_l ∪ q_r` (with local) or `q_r` (remote only, or local only with
/// `q_r` ignored and `q_l` used).
pub fn update_qcl(qcl: &mut FeatureBank, local: &[BankEntry], remote: &[&BankEntry], mode: BankMode) -> Result<()> {
    match mode {
        BankMode::LocalOnly => local.iter().try_for_each(|e| qcl.push(e.clone())),
        BankMode::WithLocal => {
            local.iter().try_for_each(|e| qcl.push(e.clone()))?;
            remote.iter().try_for_each(|e| qcl.push((*e).clone()))
        }
        BankMode::RemoteOnly => remote.iter().try_for_each(|e| qcl.push((*e).clone())),
    }
}

/// Contrastive loss over one positive and the bank negatives, averaged over
/// the batch:
///
/// `−log( exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σ_n exp(q·n/τ)) )`
///
/// `q` and `k` are `(B, d)`; `negatives` is `(M, d)` and is not differentiated.
pub fn info_nce(tape: &mut Tape, q: Var, k: Var, negatives: Option<&Tensor>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature {tau} must be positive")));
    }
    let qs = tape.shape(q).to_vec();
    if qs.len() != 2 || tape.shape(k) != qs.as_slice() {
        return Err(Error::shape("info_nce", &qs, tape.shape(k)));
    }
    let b = qs[0];
    let qk = tape.mul(q, k)?;
    let pos = tape.sum_last(qk);
    let pos = tape.reshape(pos, &[b, 1])?;
    let logits = match negatives {
        Some(n) => {
            if n.rank() != 2 || n.shape()[1] != qs[1] {
                return Err(Error::shape("info_nce", &qs, n.shape()));
            }
            let nt = tape.constant(n.transposed());
            let neg = tape.matmul(q, nt)?;
            tape.concat(&[pos, neg], 1)?
        }
        None => pos,
    };
    let logits = tape.scale(logits, 1.0 / tau);
    tape.cross_entropy(logits, &vec![0; b])
}

/// Counts negatives seen at loss evaluations and how many were produced by
/// the learning client itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NegativeAudit {
    pub evaluations: u64,
    pub negatives: u64,
    pub self_origin: u64,
}

impl NegativeAudit {
    /// Records one evaluation over `qcl`. Anonymous entries are resolved
    /// through the server's `retained` table.
    pub fn record(&mut self, qcl: &FeatureBank, self_id: u32, retained: Option<&[u32]>) -> Result<()> {
        self.evaluations += 1;
        for e in qcl.iter() {
            self.negatives += 1;
            let origin = match e.origin {
                Origin::Client(c) => c,
                Origin::Anonymous(j) => *retained
                    .and_then(|r| r.get(j as usize))
                    .ok_or_else(|| Error::Index(format!("anonymous entry {j} has no retained origin")))?,
            };
            if origin == self_id {
                self.self_origin += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &NegativeAudit) {
        self.evaluations += other.evaluations;
        self.negatives += other.negatives;
        self.self_origin += other.self_origin;
    }
}

/// Contrastive hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClConfig {
    pub tau: f64,
    pub momentum: f64,
    pub bank_capacity: usize,
    pub mode: BankMode,
    pub bank_source: BankSource,
    pub augment: AugmentConfig,
}

impl Default for ClConfig {
    fn default() -> Self {
        ClConfig {
            tau: 0.07,
            momentum: 0.99,
            bank_capacity: 256,
            mode: BankMode::RemoteOnly,
            bank_source: BankSource::KPlus,
            augment: AugmentConfig::contrastive(),
        }
    }
}

/// Per-client contrastive state.
#[derive(Debug, Clone)]
pub struct ClClient {
    pub id: u32,
    pub main: ParamSet,
    pub momentum: ParamSet,
    pub local_bank: FeatureBank,
    pub remote: Option<RemoteBank>,
    pub qcl: FeatureBank,
    pub audit: NegativeAudit,
}

/// Momentum features `(B, d)` of `images`, no gradient.
pub fn encode_features(enc: &CnnEncoder, params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let z = enc.forward(&mut tape, &p, x, true)?;
    Ok(tape.value(z).clone())
}

impl ClClient {
    pub fn new(id: u32, params: &ParamSet, width: usize, capacity: usize) -> Result<Self> {
        Ok(ClClient {
            id,
            main: params.clone(),
            momentum: params.clone(),
            local_bank: FeatureBank::new(capacity, width)?,
            remote: None,
            qcl: FeatureBank::new(capacity, width)?,
            audit: NegativeAudit::default(),
        })
    }

    /// Appends momentum features of `images` to `Q_l`.
    pub fn encode_local_features(&mut self, enc: &CnnEncoder, images: &Tensor) -> Result<Tensor> {
        let z = encode_features(enc, &self.momentum, images)?;
        self.local_bank.push_rows(&z, Origin::Client(self.id), EntryTag::Local)?;
        Ok(z)
    }

    /// Resets `Q_CL` for a new round.
    pub fn start_round(&mut self, cfg: &ClConfig) -> Result<()> {
        let remote = self.remote.as_ref().map(|r| &r.payload);
        self.qcl = init_qcl(cfg.mode, &self.local_bank, remote, cfg.bank_capacity)?;
        Ok(())
    }

    /// One training step on a batch of raw images: augment twice, contrast
    /// the main model's `q` against the momentum model's `k⁺` and `Q_CL`,
    /// update the main model, the momentum model, `Q_l` and `Q_CL`.
    pub fn step(
        &mut self,
        enc: &CnnEncoder,
        images: &Tensor,
        cfg: &ClConfig,
        opt: &mut Optimizer,
        augment: &mut Rng,
        sampling: &mut Rng,
    ) -> Result<f64> {
        let s = images.shape().to_vec();
        let (c, size, b) = (s[1], s[2], s[0]);
        let n = c * size * size;
        let mut xq = Vec::with_capacity(b * n);
        let mut xk = Vec::with_capacity(b * n);
        for img in images.data().chunks(n) {
            let (q, k) = data::augment_pair(img, c, size, &cfg.augment, augment);
            xq.extend(q);
            xk.extend(k);
        }
        let xq = Tensor::new(s.clone(), xq)?;
        let xk = Tensor::new(s.clone(), xk)?;
        let k = encode_features(enc, &self.momentum, &xk)?;

        let retained = self.remote.as_ref().map(|r| r.retained.clone());
        self.audit.record(&self.qcl, self.id, retained.as_deref().map(Vec::as_slice))?;
        let negatives = self.qcl.matrix();

        let mut tape = Tape::new();
        let p = self.main.bind(&mut tape, true);
        let x = tape.constant(xq);
        let q = enc.forward(&mut tape, &p, x, true)?;
        let kv = tape.constant(k.clone());
        let loss = info_nce(&mut tape, q, kv, negatives.as_ref(), cfg.tau)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        let mut grads = p.grads(&tape);
        grads.fill_missing(&self.main);
        opt.step(&mut self.main, &grads)?;
        momentum_update(&self.main, &mut self.momentum, cfg.momentum)?;

        let fresh = match cfg.bank_source {
            BankSource::KPlus => k,
            BankSource::Clean => encode_features(enc, &self.momentum, images)?,
        };
        self.local_bank.push_rows(&fresh, Origin::Client(self.id), EntryTag::Local)?;
        let local: Vec<BankEntry> = (0..b)
            .map(|i| BankEntry {
                feature: fresh.row(i).to_vec(),
                origin: Origin::Client(self.id),
                tag: EntryTag::Local,
            })
            .collect();
        let remote = match (&self.remote, cfg.mode.uses_remote()) {
            (Some(r), true) if !r.payload.is_empty() => sample_remote(&r.payload, b, sampling)?,
            (_, true) => return Err(Error::EmptyBank),
            _ => Vec::new(),
        };
        update_qcl(&mut self.qcl, &local, &remote, cfg.mode)?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter().map(|a| a / n).collect()
    }

    fn entry(i: usize, origin: u32) -> BankEntry {
        BankEntry {
            feature: unit(&[1.0, i as f64 + 1.0]),
            origin: Origin::Client(origin),
            tag: EntryTag::Local,
        }
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut b = FeatureBank::new(4, 2).unwrap();
        for i in 0..5 {
            b.push(entry(i, 0)).unwrap();
        }
        let kept: Vec<_> = b.iter().map(|e| e.feature.clone()).collect();
        let want: Vec<_> = (1..5).map(|i| entry(i, 0).feature).collect();
        assert_eq!(kept, want);
    }

    #[test]
    fn push_rejects_non_unit() {
        let mut b = FeatureBank::new(2, 2).unwrap();
        let mut e = entry(0, 0);
        e.feature = vec![1.0, 1.0];
        assert!(b.push(e).is_err());
    }

    #[test]
    fn momentum_update_cases() {
        let mut main = ParamSet::new();
        main.insert("w", Tensor::from_vec(vec![1.0]));
        let mut mom = ParamSet::new();
        mom.insert("w", Tensor::from_vec(vec![0.0]));
        momentum_update(&main, &mut mom, 0.9).unwrap();
        assert!((mom.get("w").unwrap().data()[0] - 0.1).abs() < 1e-15);
        momentum_update(&main, &mut mom, 0.0).unwrap();
        assert!(mom.bitwise_eq(&main));
        assert!(momentum_update(&main, &mut mom, 1.0).is_err());
    }

    #[test]
    fn remote_bank_excludes_self_and_counts() {
        let mut banks = Vec::new();
        for c in 0..3u32 {
            let mut b = FeatureBank::new(4, 2).unwrap();
            for i in 0..4 {
                b.push(entry(i, c)).unwrap();
            }
            banks.push((c, b));
        }
        let refs: Vec<(u32, &FeatureBank)> = banks.iter().filter(|(c, _)| *c != 1).map(|(c, b)| (*c, b)).collect();
        let r = build_remote_bank(&refs, 1, &mut rng::named(0, "server")).unwrap();
        assert_eq!(r.payload.len(), 8);
        assert!(r.retained.iter().all(|&o| o != 1));
        assert!(r.payload.iter().all(|e| matches!(e.origin, Origin::Anonymous(_))));
        let all: Vec<(u32, &FeatureBank)> = banks.iter().map(|(c, b)| (*c, b)).collect();
        assert!(matches!(build_remote_bank(&all, 1, &mut rng::named(0, "server")), Err(Error::Contract(_))));
    }

    #[test]
    fn sampling_single_entry_and_empty() {
        let mut b = FeatureBank::new(4, 2).unwrap();
        assert!(matches!(sample_remote(&b, 3, &mut rng::named(0, "s")), Err(Error::EmptyBank)));
        b.push(entry(0, 0)).unwrap();
        let s = sample_remote(&b, 3, &mut rng::named(0, "s")).unwrap();
        assert!(s.iter().all(|e| **e == b.entries[0]));
    }

    #[test]
    fn qcl_update_counts() {
        let mut q = FeatureBank::new(16, 2).unwrap();
        let local = vec![entry(0, 0), entry(1, 0)];
        let rb = {
            let mut b = FeatureBank::new(4, 2).unwrap();
            b.push(entry(2, 5)).unwrap();
            b
        };
        let remote = sample_remote(&rb, 2, &mut rng::named(0, "s")).unwrap();
        update_qcl(&mut q, &local, &remote, BankMode::WithLocal).unwrap();
        assert_eq!(q.len(), 4);
        update_qcl(&mut q, &local, &remote, BankMode::RemoteOnly).unwrap();
        assert_eq!(q.len(), 6);
    }

    #[test]
    fn info_nce_equal_logits_and_empty_bank() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let neg = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.5, 1.0, -0.5, 1.0, 2.0]).unwrap();
        let l = info_nce(&mut tape, q, k, Some(&neg), 0.3).unwrap();
        assert!((tape.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
        let l = info_nce(&mut tape, q, k, None, 0.3).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
        assert!(info_nce(&mut tape, q, k, None, 0.0).is_err());
    }

    #[test]
    fn snapshot_roundtrip_strips_nothing_but_anonymous() {
        let mut b = FeatureBank::new(4, 2).unwrap();
        b.push(entry(0, 3)).unwrap();
        b.push(BankEntry {
            origin: Origin::Anonymous(7),
            ..entry(1, 0)
        })
        .unwrap();
        let d = FeatureBank::decode(&b.encode(), 4, EntryTag::Local).unwrap();
        assert_eq!(d.get(0).unwrap().origin, Origin::Client(3));
        assert_eq!(d.get(1).unwrap().origin, Origin::Anonymous(1));
        assert_eq!(d.get(1).unwrap().feature, b.get(1).unwrap().feature);
    }
}
