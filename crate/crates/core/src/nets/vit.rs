//! Tiny Vision Transformer encoder/decoder pair for masked autoencoding.
//!
//! Images are `(B, C, H, W)`; a patch vector is laid out `(py, px, c)`.
//! Token matrices stack images along rows: `(B·T, width)` where `T` is the
//! number of tokens per image.

use super::{affine_norm, init_linear, init_norm, linear, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_depth: usize,
    pub decoder_mlp_hidden: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            channels: 3,
            patch: 8,
            embed_dim: 32,
            heads: 2,
            depth: 2,
            mlp_hidden: 64,
            decoder_dim: 16,
            decoder_heads: 2,
            decoder_depth: 1,
            decoder_mlp_hidden: 32,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::shape("vit_config", &[self.image_size, self.image_size], &[self.patch]));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::shape("vit_config", &[self.embed_dim], &[self.heads]));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::shape("vit_config", &[self.decoder_dim], &[self.decoder_heads]));
        }
        Ok(())
    }

    /// `N = HW / P²`.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch) * (self.image_size / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Splits `(B, C, H, W)` images into `(B, N, P²·C)` patch vectors, row-major
/// over the patch grid.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::shape("patchify", s, &[patch]));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let pd = patch * patch * c;
    let src = images.data();
    let mut out = vec![0.0; b * n * pd];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (bi * n + gy * gw + gx) * pd;
                for py in 0..patch {
                    for px in 0..patch {
                        for ci in 0..c {
                            let y = gy * patch + py;
                            let x = gx * patch + px;
                            out[base + (py * patch + px) * c + ci] = src[((bi * c + ci) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, n, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, channels: usize, height: usize, width: usize) -> Result<Tensor> {
    let s = patches.shape();
    let (gh, gw) = (height / patch, width / patch);
    let pd = patch * patch * channels;
    if s.len() != 3 || s[1] != gh * gw || s[2] != pd || height % patch != 0 || width % patch != 0 {
        return Err(Error::shape("unpatchify", s, &[gh * gw, pd]));
    }
    let b = s[0];
    let n = gh * gw;
    let src = patches.data();
    let mut out = vec![0.0; b * channels * height * width];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (bi * n + gy * gw + gx) * pd;
                for py in 0..patch {
                    for px in 0..patch {
                        for ci in 0..channels {
                            let y = gy * patch + py;
                            let x = gx * patch + px;
                            out[((bi * channels + ci) * height + y) * width + x] = src[base + (py * patch + px) * channels + ci];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, channels, height, width], out)
}

/// Encoder output: class token plus visible-patch states for each image.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `(B·T, embed_dim)` with `T = 1 + visible`; row `b·T` is the class token.
    pub states: Var,
    pub batch: usize,
    pub tokens: usize,
}

/// Encoder `f` and decoder `g` of a masked autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaeModel {
    pub cfg: VitConfig,
}

struct Stack<'a> {
    prefix: &'a str,
    width: usize,
    heads: usize,
    depth: usize,
}

impl MaeModel {
    pub fn new(cfg: VitConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MaeModel { cfg })
    }

    pub const CLASS_TOKEN: &'static str = "encoder.cls_token";
    pub const MASK_TOKEN: &'static str = "decoder.mask_token";

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    fn encoder_stack(&self) -> Stack<'static> {
        Stack {
            prefix: "encoder.blocks",
            width: self.cfg.embed_dim,
            heads: self.cfg.heads,
            depth: self.cfg.depth,
        }
    }

    fn decoder_stack(&self) -> Stack<'static> {
        Stack {
            prefix: "decoder.blocks",
            width: self.cfg.decoder_dim,
            heads: self.cfg.decoder_heads,
            depth: self.cfg.decoder_depth,
        }
    }

    fn init_blocks(params: &mut ParamSet, prefix: &str, width: usize, hidden: usize, depth: usize, rng: &mut Rng) {
        for i in 0..depth {
            let b = format!("{prefix}.{i}");
            init_norm(params, &format!("{b}.norm1"), width);
            init_linear(params, &format!("{b}.attn.qkv"), width, 3 * width, INIT_STD, rng);
            init_linear(params, &format!("{b}.attn.proj"), width, width, INIT_STD, rng);
            init_norm(params, &format!("{b}.norm2"), width);
            init_linear(params, &format!("{b}.mlp.fc1"), width, hidden, INIT_STD, rng);
            init_linear(params, &format!("{b}.mlp.fc2"), hidden, width, INIT_STD, rng);
        }
    }

    /// Encoder parameters only.
    pub fn init_encoder(&self, rng: &mut Rng) -> ParamSet {
        let c = &self.cfg;
        let n = c.num_patches();
        let mut p = ParamSet::new();
        init_linear(&mut p, "encoder.patch_embed", c.patch_dim(), c.embed_dim, INIT_STD, rng);
        p.insert(Self::CLASS_TOKEN, Tensor::trunc_normal(&[1, c.embed_dim], INIT_STD, rng));
        p.insert("encoder.pos_embed", Tensor::trunc_normal(&[n + 1, c.embed_dim], INIT_STD, rng));
        Self::init_blocks(&mut p, "encoder.blocks", c.embed_dim, c.mlp_hidden, c.depth, rng);
        init_norm(&mut p, "encoder.norm", c.embed_dim);
        p
    }

    /// Encoder followed by decoder parameters.
    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let c = &self.cfg;
        let n = c.num_patches();
        let mut p = self.init_encoder(rng);
        init_linear(&mut p, "decoder.embed", c.embed_dim, c.decoder_dim, INIT_STD, rng);
        p.insert(Self::MASK_TOKEN, Tensor::trunc_normal(&[1, c.decoder_dim], INIT_STD, rng));
        p.insert("decoder.pos_embed", Tensor::trunc_normal(&[n, c.decoder_dim], INIT_STD, rng));
        Self::init_blocks(&mut p, "decoder.blocks", c.decoder_dim, c.decoder_mlp_hidden, c.decoder_depth, rng);
        init_norm(&mut p, "decoder.norm", c.decoder_dim);
        init_linear(&mut p, "decoder.pred", c.decoder_dim, c.patch_dim(), INIT_STD, rng);
        p
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var, batch: usize, tokens: usize, width: usize, heads: usize) -> Result<Var> {
        let qkv = linear(tape, p, &format!("{prefix}.qkv"), x)?;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut images = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = tape.narrow(qkv, 0, b * tokens, tokens)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = tape.narrow(rows, 1, h * dh, dh)?;
                let k = tape.narrow(rows, 1, width + h * dh, dh)?;
                let v = tape.narrow(rows, 1, 2 * width + h * dh, dh)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax(scores);
                outs.push(tape.matmul(attn, v)?);
            }
            images.push(if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? });
        }
        let merged = if batch == 1 { images[0] } else { tape.concat(&images, 0)? };
        linear(tape, p, &format!("{prefix}.proj"), merged)
    }

    fn blocks(&self, tape: &mut Tape, p: &Bound, stack: &Stack<'_>, mut x: Var, batch: usize, tokens: usize) -> Result<Var> {
        for i in 0..stack.depth {
            let b = format!("{}.{i}", stack.prefix);
            let h = affine_norm(tape, p, &format!("{b}.norm1"), x)?;
            let h = self.attention(tape, p, &format!("{b}.attn"), h, batch, tokens, stack.width, stack.heads)?;
            x = tape.add(x, h)?;
            let h = affine_norm(tape, p, &format!("{b}.norm2"), x)?;
            let h = linear(tape, p, &format!("{b}.mlp.fc1"), h)?;
            let h = tape.gelu(h);
            let h = linear(tape, p, &format!("{b}.mlp.fc2"), h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    fn check_indices(&self, indices: &[Vec<usize>]) -> Result<usize> {
        let n = self.cfg.num_patches();
        let v = indices.first().map(Vec::len).ok_or_else(|| Error::Index("empty batch".into()))?;
        for idx in indices {
            if idx.len() != v {
                return Err(Error::Index(format!("visible counts differ: {} vs {v}", idx.len())));
            }
            let mut seen = vec![false; n];
            for &i in idx {
                if i >= n {
                    return Err(Error::Index(format!("patch index {i} out of range [0, {n})")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Index(format!("duplicate patch index {i}")));
                }
            }
        }
        Ok(v)
    }

    /// Encodes a subset of patches per image.
    ///
    /// `patches` is `(B·v, P²·C)` holding, for image `b`, the patches listed in
    /// `indices[b]` in that order. Positional embeddings are picked by index,
    /// so the result does not depend on the order patches are listed in.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, patches: Var, indices: &[Vec<usize>]) -> Result<Encoded> {
        let v = self.check_indices(indices)?;
        let batch = indices.len();
        let d = self.cfg.embed_dim;
        let ps = tape.shape(patches).to_vec();
        // With nothing visible only the class token is encoded and `patches` is ignored.
        if v > 0 && ps != [batch * v, self.cfg.patch_dim()] {
            return Err(Error::shape("vit_encode", &ps, &[batch * v, self.cfg.patch_dim()]));
        }
        let pos = p.var("encoder.pos_embed")?;
        let pos_rows: Vec<usize> = indices.iter().flat_map(|idx| idx.iter().map(|i| i + 1)).collect();
        let cls = p.var(Self::CLASS_TOKEN)?;
        let pos0 = tape.narrow(pos, 0, 0, 1)?;
        let cls = tape.add(cls, pos0)?;
        let tokens = if v == 0 {
            None
        } else {
            let emb = linear(tape, p, "encoder.patch_embed", patches)?;
            let pe = tape.gather_rows(pos, &pos_rows)?;
            Some(tape.add(emb, pe)?)
        };
        let mut seq = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            seq.push(cls);
            if let Some(t) = tokens {
                seq.push(tape.narrow(t, 0, b * v, v)?);
            }
        }
        let x = if seq.len() == 1 { seq[0] } else { tape.concat(&seq, 0)? };
        debug_assert_eq!(tape.shape(x), &[batch * (v + 1), d]);
        let x = self.blocks(tape, p, &self.encoder_stack(), x, batch, v + 1)?;
        let states = affine_norm(tape, p, "encoder.norm", x)?;
        Ok(Encoded {
            states,
            batch,
            tokens: v + 1,
        })
    }

    /// Reference forward over all `N` patches in grid order, without index
    /// selection. Input is `(B, N, P²·C)` flattened to `(B·N, P²·C)`.
    pub fn encode_full(&self, tape: &mut Tape, p: &Bound, patches: Var, batch: usize) -> Result<Encoded> {
        let n = self.cfg.num_patches();
        let ps = tape.shape(patches).to_vec();
        if ps != [batch * n, self.cfg.patch_dim()] {
            return Err(Error::shape("vit_forward", &ps, &[batch * n, self.cfg.patch_dim()]));
        }
        let pos = p.var("encoder.pos_embed")?;
        let emb = linear(tape, p, "encoder.patch_embed", patches)?;
        let all: Vec<usize> = (0..batch).flat_map(|_| 1..=n).collect();
        let pe = tape.gather_rows(pos, &all)?;
        let tokens = tape.add(emb, pe)?;
        let cls = p.var(Self::CLASS_TOKEN)?;
        let pos0 = tape.narrow(pos, 0, 0, 1)?;
        let cls = tape.add(cls, pos0)?;
        let mut seq = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            seq.push(cls);
            seq.push(tape.narrow(tokens, 0, b * n, n)?);
        }
        let x = tape.concat(&seq, 0)?;
        let x = self.blocks(tape, p, &self.encoder_stack(), x, batch, n + 1)?;
        let states = affine_norm(tape, p, "encoder.norm", x)?;
        Ok(Encoded {
            states,
            batch,
            tokens: n + 1,
        })
    }

    /// Class-token states `(B, embed_dim)`.
    pub fn class_states(&self, tape: &mut Tape, enc: &Encoded) -> Result<Var> {
        let rows: Vec<usize> = (0..enc.batch).map(|b| b * enc.tokens).collect();
        tape.gather_rows(enc.states, &rows)
    }

    /// Reconstructs all `N` patches per image: `(B·N, P²·C)`.
    ///
    /// Decoder input for image `b` is the projected encoder state at each
    /// visible index and the shared mask token elsewhere, plus decoder
    /// positional embeddings. The class token is not passed to the decoder.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, enc: &Encoded, indices: &[Vec<usize>]) -> Result<Var> {
        let n = self.cfg.num_patches();
        if indices.len() != enc.batch || indices.iter().any(|i| i.len() + 1 != enc.tokens) {
            return Err(Error::shape("vit_decode", &[enc.batch, enc.tokens - 1], &[indices.len(), indices.first().map_or(0, Vec::len)]));
        }
        let x = linear(tape, p, "decoder.embed", enc.states)?;
        let mask = p.var(Self::MASK_TOKEN)?;
        let pool = tape.concat(&[x, mask], 0)?;
        let mask_row = enc.batch * enc.tokens;
        let mut rows = Vec::with_capacity(enc.batch * n);
        for (b, idx) in indices.iter().enumerate() {
            let mut slot = vec![mask_row; n];
            for (j, &i) in idx.iter().enumerate() {
                slot[i] = b * enc.tokens + 1 + j;
            }
            rows.extend(slot);
        }
        let full = tape.gather_rows(pool, &rows)?;
        let pos_rows: Vec<usize> = (0..enc.batch).flat_map(|_| 0..n).collect();
        let pe = tape.gather_rows(p.var("decoder.pos_embed")?, &pos_rows)?;
        let x = tape.add(full, pe)?;
        let x = self.blocks(tape, p, &self.decoder_stack(), x, enc.batch, n)?;
        let x = affine_norm(tape, p, "decoder.norm", x)?;
        linear(tape, p, "decoder.pred", x)
    }
}
