//! Synthetic multi-class images, non-IID client partitions and augmentation.
//!
//! Each class is a texture family (stripes, lattice, square wave, speckle,
//! blob, rings) drawn at a random period, orientation and phase over a
//! randomly tinted base color, so color carries no class signal. Each
//! client belongs to one of three groups that apply a chromatic gain and
//! offset to every image, standing in for datasets photographed under
//! different skin tones. Clients `0..7` are group A, `7` and `8` group B and
//! `9` group C.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nets::checkpoint::Reader;
use crate::digest::{self, Fnv1a};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
    C,
}

impl Group {
    /// Group assignment for a 10-client federation; larger federations repeat
    /// the pattern.
    pub fn of_client(id: u32) -> Group {
        match id % 10 {
            0..=6 => Group::A,
            7 | 8 => Group::B,
            _ => Group::C,
        }
    }

    /// Per-channel `(gain, offset)`.
    fn shift(self, strength: f64) -> [(f64, f64); 3] {
        let base = match self {
            Group::A => [(1.0, 0.0), (1.0, 0.0), (1.0, 0.0)],
            Group::B => [(0.85, 0.02), (0.72, 0.0), (0.62, 0.0)],
            Group::C => [(0.55, 0.0), (0.45, 0.0), (0.40, 0.0)],
        };
        base.map(|(g, o)| (1.0 + strength * (g - 1.0), strength * o))
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::A => "A",
            Group::B => "B",
            Group::C => "C",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Additive pixel noise.
    pub noise: f64,
    /// Texture amplitude; the class cue.
    pub amplitude: f64,
    /// Spread of per-image brightness and tint around the base color.
    pub color_jitter: f64,
    /// Scales the group chromatic shift; 0 disables the non-IID color split.
    pub group_strength: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 5,
            clients: 10,
            samples_per_client: 100,
            image_size: 32,
            channels: 3,
            noise: 0.05,
            amplitude: 0.2,
            color_jitter: 0.03,
            group_strength: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=Texture::ALL.len()).contains(&self.num_classes) {
            return Err(Error::config(
                "data.num_classes",
                format!("{} outside 2..={}", self.num_classes, Texture::ALL.len()),
            ));
        }
        if self.clients == 0 {
            return Err(Error::config("data.clients", "need at least one client"));
        }
        if self.samples_per_client < self.num_classes {
            return Err(Error::config(
                "data.samples_per_client",
                format!("{} is fewer than num_classes = {}", self.samples_per_client, self.num_classes),
            ));
        }
        if self.image_size < 4 || self.channels != 3 {
            return Err(Error::config("data.image_size", "images must be at least 4×4 with 3 channels"));
        }
        for (key, v) in [
            ("data.noise", self.noise),
            ("data.amplitude", self.amplitude),
            ("data.color_jitter", self.color_jitter),
            ("data.group_strength", self.group_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Grayscale texture of the given family in `[-1, 1]`, row-major.
    ///
    /// Period, orientation, phase and placement are random, so crops, flips
    /// and rotations keep the family recognisable; only the local structure
    /// identifies the class.
    fn texture(&self, class: usize, rng: &mut Rng) -> Vec<f64> {
        let s = self.image_size;
        let sf = s as f64;
        let period = rng.random_range(PERIOD_MIN..PERIOD_MAX) * sf / 32.0;
        let w = 2.0 * PI / period;
        let phase = rng.random_range(0.0..2.0 * PI);
        let angle = rng.random_range(0.0..PI);
        let (ca, sa) = (angle.cos(), angle.sin());
        let (cx, cy) = (rng.random_range(0.25..0.75) * sf, rng.random_range(0.25..0.75) * sf);
        let texture = Texture::ALL[class];
        let cell = (period / 3.0).round().max(1.0) as usize;
        let cells = s.div_ceil(cell);
        let speckle: Vec<f64> = match texture {
            Texture::Speckle => (0..cells * cells).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
            _ => Vec::new(),
        };
        let mut out = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f64, y as f64);
                let u = fx * ca + fy * sa;
                let v = -fx * sa + fy * ca;
                let (dx, dy) = (fx - cx, fy - cy);
                out[y * s + x] = match texture {
                    Texture::Stripes => (w * u + phase).sin(),
                    Texture::Lattice => 0.5 * ((w * u + phase).cos() + (w * v).cos()),
                    Texture::SquareWave => (w * u + phase).sin().signum(),
                    Texture::Speckle => speckle[(y / cell) * cells + x / cell],
                    Texture::Blob => {
                        let sigma = 1.5 * period;
                        2.0 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() - 1.0
                    }
                    Texture::Rings => (w * (dx * dx + dy * dy).sqrt() + phase).sin(),
                };
            }
        }
        out
    }

    fn render(&self, class: usize, group: Group, rng: &mut Rng) -> Vec<f64> {
        let s = self.image_size;
        let tex = self.texture(class, rng);
        let bright: f64 = StandardNormal.sample(rng);
        let tint: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let shift = group.shift(self.group_strength);
        let mut out = vec![0.0; self.pixels()];
        for c in 0..3 {
            let base = BASE_COLOR[c] + self.color_jitter * (bright + tint[c]);
            let (gain, offset) = shift[c];
            for (i, t) in tex.iter().enumerate() {
                let n: f64 = StandardNormal.sample(rng);
                let v = (base + self.amplitude * t) * gain + offset + self.noise * n;
                out[c * s * s + i] = v.clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Class-defining texture families, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Stripes,
    Lattice,
    SquareWave,
    Speckle,
    Blob,
    Rings,
}

impl Texture {
    pub const ALL: [Texture; 6] = [
        Texture::Stripes,
        Texture::Lattice,
        Texture::SquareWave,
        Texture::Speckle,
        Texture::Blob,
        Texture::Rings,
    ];
}

/// Texture period range in pixels at 32×32; scales with image size.
const PERIOD_MIN: f64 = 4.0;
const PERIOD_MAX: f64 = 7.0;
const BASE_COLOR: [f64; 3] = [0.55, 0.45, 0.40];

/// Images `(n, C, H, W)` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Batch of the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data).expect("nonempty batch")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Concatenation of several splits.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Split>) -> Result<Split> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut shape = None;
        for s in parts {
            shape.get_or_insert_with(|| s.images.shape().to_vec());
            data.extend_from_slice(s.images.data());
            labels.extend_from_slice(&s.labels);
        }
        let mut shape = shape.ok_or_else(|| Error::contract("concat of no splits"))?;
        shape[0] = labels.len();
        Ok(Split {
            images: Tensor::new(shape, data)?,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub id: u32,
    pub group: Group,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl ClientData {
    pub fn label_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for s in [&self.train, &self.val, &self.test] {
            for &l in &s.labels {
                h[l] += 1;
            }
        }
        h
    }

    pub fn digest(&self) -> u64 {
        fnv_of(&encode_client(self))
    }
}

fn fnv_of(bytes: &[u8]) -> u64 {
    digest::fnv1a(bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub spec: SynthSpec,
    pub seed: u64,
    pub clients: Vec<ClientData>,
}

/// Sizes of the 60/20/20 train/val/test split of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n * 3) / 5;
    let val = (n - train) / 2;
    (train, val, n - train - val)
}

/// Generates every client's shard from `stream(seed, "data", client, 0)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Partition> {
    spec.validate()?;
    let clients = (0..spec.clients as u32)
        .map(|id| generate_client(spec, seed, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition {
        spec: spec.clone(),
        seed,
        clients,
    })
}

fn generate_client(spec: &SynthSpec, seed: u64, id: u32) -> Result<ClientData> {
    let mut rng = rng::stream(seed, "data", id as u64, 0);
    let group = Group::of_client(id);
    let n = spec.samples_per_client;
    // Balanced labels (counts differ by at most one), then shuffled.
    let offset = rng.random_range(0..spec.num_classes);
    let mut labels: Vec<usize> = (0..n).map(|i| (i + offset) % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let images: Vec<Vec<f64>> = labels.iter().map(|&l| spec.render(l, group, &mut rng)).collect();
    let (ntr, nva, _) = split_sizes(n);
    let s = spec.image_size;
    let make = |range: std::ops::Range<usize>| -> Result<Split> {
        let data: Vec<f64> = images[range.clone()].iter().flatten().copied().collect();
        Ok(Split {
            images: Tensor::new(vec![range.len(), spec.channels, s, s], data)?,
            labels: labels[range].to_vec(),
        })
    };
    Ok(ClientData {
        id,
        group,
        train: make(0..ntr)?,
        val: make(ntr..ntr + nva)?,
        test: make(ntr + nva..n)?,
    })
}

/// Parameters of the random transform family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    pub flip_p: f64,
    /// Each channel is multiplied by a factor in `1 ± channel_jitter`.
    pub channel_jitter: f64,
    /// Additive brightness shift drawn from `±brightness`.
    pub brightness: f64,
    /// Probability of replacing every channel by the channel mean.
    pub grayscale_p: f64,
    /// Probability of a rotation by a nonzero multiple of 90°.
    pub rotate_p: f64,
    pub noise: f64,
}

impl AugmentConfig {
    /// Crop, flip, strong color distortion, rotation and noise.
    pub fn contrastive() -> Self {
        AugmentConfig {
            crop_scale: (0.5, 1.0),
            flip_p: 0.5,
            channel_jitter: 0.4,
            brightness: 0.2,
            grayscale_p: 0.2,
            rotate_p: 0.25,
            noise: 0.02,
        }
    }

    /// Crop and flip only.
    pub fn mae() -> Self {
        AugmentConfig {
            crop_scale: (0.5, 1.0),
            flip_p: 0.5,
            channel_jitter: 0.0,
            brightness: 0.0,
            grayscale_p: 0.0,
            rotate_p: 0.0,
            noise: 0.0,
        }
    }

    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale: (1.0, 1.0),
            flip_p: 0.0,
            channel_jitter: 0.0,
            brightness: 0.0,
            grayscale_p: 0.0,
            rotate_p: 0.0,
            noise: 0.0,
        }
    }
}

/// Mirrors a `(C, H, W)` image left to right.
pub fn hflip(img: &[f64], channels: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        for y in 0..size {
            let row = (c * size + y) * size;
            for x in 0..size {
                out[row + x] = img[row + size - 1 - x];
            }
        }
    }
    out
}

/// Rotates a square `(C, H, W)` image counter-clockwise by `quarter`·90°.
pub fn rot90(img: &[f64], channels: usize, size: usize, quarter: usize) -> Vec<f64> {
    let mut cur = img.to_vec();
    for _ in 0..quarter % 4 {
        let mut out = vec![0.0; img.len()];
        for c in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    out[(c * size + (size - 1 - x)) * size + y] = cur[(c * size + y) * size + x];
                }
            }
        }
        cur = out;
    }
    cur
}

/// Bilinear resample of the window `(top, left, h, w)` back to full size.
fn resized_crop(img: &[f64], channels: usize, size: usize, top: f64, left: f64, h: f64, w: f64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let last = (size - 1) as f64;
    for y in 0..size {
        let sy = (top + (y as f64 + 0.5) * h / size as f64 - 0.5).clamp(0.0, last);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(size - 1);
        let fy = sy - y0 as f64;
        for x in 0..size {
            let sx = (left + (x as f64 + 0.5) * w / size as f64 - 0.5).clamp(0.0, last);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(size - 1);
            let fx = sx - x0 as f64;
            for c in 0..channels {
                let at = |yy: usize, xx: usize| img[(c * size + yy) * size + xx];
                let top_row = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot_row = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(c * size + y) * size + x] = top_row * (1.0 - fy) + bot_row * fy;
            }
        }
    }
    out
}

/// One random transform of a `(C, H, W)` image in `[0, 1]`.
pub fn augment(img: &[f64], channels: usize, size: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let mut x = img.to_vec();
    let (lo, hi) = cfg.crop_scale;
    if lo < 1.0 {
        let area = rng.random_range(lo..=hi);
        let log_ratio = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let s = size as f64;
        let w = ((area * ratio).sqrt() * s).min(s);
        let h = ((area / ratio).sqrt() * s).min(s);
        let top = rng.random_range(0.0..=s - h);
        let left = rng.random_range(0.0..=s - w);
        x = resized_crop(&x, channels, size, top, left, h, w);
    }
    if cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p) {
        x = hflip(&x, channels, size);
    }
    if cfg.channel_jitter > 0.0 {
        let plane = size * size;
        for c in 0..channels {
            let f = 1.0 + rng.random_range(-cfg.channel_jitter..=cfg.channel_jitter);
            x[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v *= f);
        }
    }
    if cfg.brightness > 0.0 {
        let b = rng.random_range(-cfg.brightness..=cfg.brightness);
        x.iter_mut().for_each(|v| *v += b);
    }
    if cfg.grayscale_p > 0.0 && rng.random_bool(cfg.grayscale_p) {
        let plane = size * size;
        for i in 0..plane {
            let m = (0..channels).map(|c| x[c * plane + i]).sum::<f64>() / channels as f64;
            (0..channels).for_each(|c| x[c * plane + i] = m);
        }
    }
    if cfg.rotate_p > 0.0 && rng.random_bool(cfg.rotate_p) {
        x = rot90(&x, channels, size, rng.random_range(1..4));
    }
    if cfg.noise > 0.0 {
        for v in x.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += cfg.noise * n;
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    x
}

/// Two independent draws from the transform family: `(x_q, x_k)`.
pub fn augment_pair(img: &[f64], channels: usize, size: usize, cfg: &AugmentConfig, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let q = augment(img, channels, size, cfg, rng);
    let k = augment(img, channels, size, cfg, rng);
    (q, k)
}

/// Augments every image of a `(B, C, H, W)` batch.
pub fn augment_batch(images: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    let s = images.shape();
    let (c, size) = (s[1], s[2]);
    let n = c * size * size;
    let data = images
        .data()
        .chunks(n)
        .flat_map(|img| augment(img, c, size, cfg, rng))
        .collect();
    Tensor::new(s.to_vec(), data).expect("same shape")
}

/// Labeled subset of one client's training split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    /// Sorted indices into the training split.
    pub labeled: Vec<usize>,
    /// Set when some class was too small to stratify and the subset was drawn
    /// without regard to class.
    pub unstratified: bool,
}

/// Largest-remainder apportionment of `total` over `weights`.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rem: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((total * w) % sum, i))
        .collect();
    // Larger remainder first, lower index on ties.
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Picks `round(L·n)` training samples, stratified by class when every class
/// has `L·count ≥ 1`.
pub fn label_mask(labels: &[usize], num_classes: usize, fraction: f64, rng: &mut Rng) -> Result<LabelMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("finetune.label_fraction", format!("{fraction} outside (0, 1]")));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(LabelMask {
            labeled: Vec::new(),
            unstratified: false,
        });
    }
    let total = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|c| !c.is_empty()).collect();
    let stratify = present.iter().all(|c| fraction * c.len() as f64 >= 1.0);
    let mut labeled = Vec::with_capacity(total);
    if stratify {
        let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let quota = apportion(total, &counts);
        for (members, q) in by_class.iter_mut().zip(quota) {
            members.shuffle(rng);
            labeled.extend_from_slice(&members[..q]);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        labeled.extend_from_slice(&all[..total]);
    }
    labeled.sort_unstable();
    Ok(LabelMask {
        labeled,
        unstratified: !stratify,
    })
}

// Export.

const DATA_MAGIC: &[u8; 4] = b"FSDS";
const DATA_VERSION: u32 = 1;

/// Client shard container:
///
/// ```text
/// magic b"FSDS", version u32, client id u32, group u8 (0=A,1=B,2=C),
/// channels u32, height u32, width u32,
/// 3 × (count u32, labels count × u32, pixels count·C·H·W × f64)   train, val, test
/// ```
/// All integers and floats little-endian.
pub fn encode_client(c: &ClientData) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&c.id.to_le_bytes());
    out.push(match c.group {
        Group::A => 0,
        Group::B => 1,
        Group::C => 2,
    });
    let s = c.train.images.shape();
    for d in &s[1..] {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for split in [&c.train, &c.val, &c.test] {
        out.extend_from_slice(&(split.len() as u32).to_le_bytes());
        for &l in &split.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for v in split.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_client(bytes: &[u8]) -> Result<ClientData> {
    let mut r = Reader::new(bytes, "dataset");
    if r.take(4)? != DATA_MAGIC {
        return Err(Error::format("dataset", "bad magic"));
    }
    let v = r.u32()?;
    if v != DATA_VERSION {
        return Err(Error::format("dataset", format!("unsupported version {v}")));
    }
    let id = r.u32()?;
    let group = match r.u8()? {
        0 => Group::A,
        1 => Group::B,
        2 => Group::C,
        g => return Err(Error::format("dataset", format!("unknown group {g}"))),
    };
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut splits = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = r.u32()? as usize;
        let labels = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(n * c * h * w)?;
        let images = Tensor::new(vec![n, c, h, w], data).map_err(|e| Error::format("dataset", e.to_string()))?;
        splits.push(Split { images, labels });
    }
    r.finish()?;
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(ClientData {
        id,
        group,
        train,
        val,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub client: u32,
    pub group: Group,
    pub file: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub seed: u64,
    pub clients: Vec<ManifestEntry>,
    /// Digest over the client digests in id order.
    pub digest: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn manifest(p: &Partition) -> Manifest {
    let mut all = Fnv1a::new();
    let clients = p
        .clients
        .iter()
        .map(|c| {
            let d = c.digest();
            all.write_u64(d);
            ManifestEntry {
                client: c.id,
                group: c.group,
                file: format!("client_{:02}.bin", c.id),
                train: c.train.len(),
                val: c.val.len(),
                test: c.test.len(),
                digest: digest::hex(d),
            }
        })
        .collect();
    Manifest {
        spec: p.spec.clone(),
        seed: p.seed,
        clients,
        digest: digest::hex(all.finish()),
    }
}

/// Writes one file per client plus `manifest.json` into `dir`, creating it.
pub fn export(p: &Partition, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = manifest(p);
    for (c, entry) in p.clients.iter().zip(&m.clients) {
        let path = dir.join(&entry.file);
        std::fs::write(&path, encode_client(c)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(m)
}

/// Reads a partition written by [`export`], verifying digests.
pub fn import(dir: &Path) -> Result<Partition> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let mut clients = Vec::with_capacity(m.clients.len());
    for entry in &m.clients {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if digest::hex(fnv_of(&bytes)) != entry.digest {
            return Err(Error::format("dataset", format!("digest mismatch for {}", entry.file)));
        }
        clients.push(decode_client(&bytes)?);
    }
    Ok(Partition {
        spec: m.spec,
        seed: m.seed,
        clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            clients: 3,
            samples_per_client: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(&small(), 9).unwrap();
        let b = generate(&small(), 9).unwrap();
        assert_eq!(manifest(&a), manifest(&b));
        assert_ne!(manifest(&a).digest, manifest(&generate(&small(), 10).unwrap()).digest);
    }

    #[test]
    fn histograms_and_splits() {
        let p = generate(&small(), 1).unwrap();
        for c in &p.clients {
            let h = c.label_histogram(5);
            assert_eq!(h.iter().sum::<usize>(), 20);
            assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
            assert_eq!((c.train.len(), c.val.len(), c.test.len()), (12, 4, 4));
            assert!(c.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(split_sizes(100), (60, 20, 20));
    }

    #[test]
    fn too_few_samples_is_config_error() {
        let spec = SynthSpec {
            samples_per_client: 3,
            ..SynthSpec::default()
        };
        assert!(generate(&spec, 0).unwrap_err().is_config());
    }

    #[test]
    fn groups_follow_layout() {
        let g: Vec<Group> = (0..10).map(Group::of_client).collect();
        assert_eq!(&g[..7], &[Group::A; 7]);
        assert_eq!(&g[7..], &[Group::B, Group::B, Group::C]);
    }

    #[test]
    fn flip_is_involution_and_rotation_cycles() {
        let img = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng::named(1, "x")).into_data();
        assert_eq!(hflip(&hflip(&img, 3, 8), 3, 8), img);
        assert_eq!(rot90(&img, 3, 8, 4), img);
        assert_ne!(rot90(&img, 3, 8, 1), img);
    }

    #[test]
    fn identity_augment_returns_input() {
        let img = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng::named(1, "x")).into_data();
        let out = augment(&img, 3, 8, &AugmentConfig::identity(), &mut rng::named(2, "a"));
        assert_eq!(out, img);
    }

    #[test]
    fn augment_pair_is_seeded_and_in_range() {
        let img = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng::named(1, "x")).into_data();
        let cfg = AugmentConfig::contrastive();
        let a = augment_pair(&img, 3, 32, &cfg, &mut rng::named(3, "augment"));
        let b = augment_pair(&img, 3, 32, &cfg, &mut rng::named(3, "augment"));
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);
        assert!(a.0.iter().chain(&a.1).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn label_mask_counts() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let mut r = rng::named(0, "labels");
        assert_eq!(label_mask(&labels, 5, 1.0, &mut r).unwrap().labeled.len(), 100);
        let m = label_mask(&labels, 5, 0.1, &mut r).unwrap();
        assert_eq!(m.labeled.len(), 10);
        assert!(!m.unstratified);
        let m = label_mask(&labels[..10], 5, 0.1, &mut r).unwrap();
        assert!(m.unstratified);
        assert_eq!(m.labeled.len(), 1);
        assert!(label_mask(&labels, 5, 0.0, &mut r).is_err());
    }

    #[test]
    fn apportion_sums_to_total() {
        assert_eq!(apportion(10, &[3, 3, 4]), vec![3, 3, 4]);
        assert_eq!(apportion(5, &[1, 1, 1]).iter().sum::<usize>(), 5);
        assert_eq!(apportion(2, &[1, 1, 1]), vec![1, 1, 0]);
    }

    #[test]
    fn export_roundtrip() {
        let p = generate(&small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = export(&p, &dir.path().join("nested")).unwrap();
        let q = import(&dir.path().join("nested")).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, manifest(&q));
    }
}
