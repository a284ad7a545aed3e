use fedssl_core::mae::{make_mask, masked_count};
use fedssl_core::nets::vit::{patchify, MaeModel, VitConfig};
use fedssl_core::nets::ParamSet;
use fedssl_core::{rng, Tape, Tensor};
use rand::seq::SliceRandom;

fn tiny() -> MaeModel {
    MaeModel::new(VitConfig {
        image_size: 8,
        channels: 3,
        patch: 2,
        embed_dim: 8,
        heads: 2,
        depth: 2,
        mlp_hidden: 16,
        decoder_dim: 8,
        decoder_heads: 2,
        decoder_depth: 1,
        decoder_mlp_hidden: 16,
    })
    .unwrap()
}

/// Rows of `(B, N, D)` patches listed per image, flattened to `(B·v, D)`.
fn select(patches: &Tensor, indices: &[Vec<usize>]) -> Tensor {
    let (n, d) = (patches.shape()[1], patches.shape()[2]);
    let mut out = Vec::new();
    for (b, idx) in indices.iter().enumerate() {
        for &i in idx {
            out.extend_from_slice(&patches.data()[(b * n + i) * d..(b * n + i + 1) * d]);
        }
    }
    let v = indices[0].len();
    Tensor::new(vec![indices.len() * v, d], out).unwrap()
}

fn encode(m: &MaeModel, p: &ParamSet, patches: &Tensor, indices: &[Vec<usize>]) -> Tensor {
    let mut t = Tape::new();
    let bound = p.bind(&mut t, false);
    let x = t.constant(select(patches, indices));
    let enc = m.encode(&mut t, &bound, x, indices).unwrap();
    t.value(enc.states).clone()
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let w = t.shape()[1];
    &t.data()[i * w..(i + 1) * w]
}

fn setup(seed: u64, batch: usize) -> (MaeModel, ParamSet, Tensor) {
    let m = tiny();
    let mut r = rng::named(seed, "vit-test");
    let p = m.init(&mut r);
    let images = Tensor::uniform(&[batch, 3, 8, 8], 0.0, 1.0, &mut r);
    let patches = patchify(&images, 2).unwrap();
    (m, p, patches)
}

#[test]
fn encoder_is_equivariant_to_patch_order() {
    let (m, p, patches) = setup(1, 2);
    let mut r = rng::named(2, "perm");
    for _ in 0..10 {
        let mut base: Vec<usize> = (0..16).collect();
        base.shuffle(&mut r);
        base.truncate(5);
        let mut perm = base.clone();
        perm.shuffle(&mut r);
        let a = encode(&m, &p, &patches, &[base.clone(), base.clone()]);
        let b = encode(&m, &p, &patches, &[perm.clone(), perm.clone()]);
        let tokens = base.len() + 1;
        for img in 0..2 {
            let cls = img * tokens;
            for (x, y) in row(&a, cls).iter().zip(row(&b, cls)) {
                assert!((x - y).abs() < 1e-12);
            }
            for (j, idx) in base.iter().enumerate() {
                let k = perm.iter().position(|q| q == idx).unwrap();
                for (x, y) in row(&a, cls + 1 + j).iter().zip(row(&b, cls + 1 + k)) {
                    assert!((x - y).abs() < 1e-12, "patch {idx}");
                }
            }
        }
    }
}

#[test]
fn all_indices_in_order_match_the_reference_forward_bitwise() {
    let (m, p, patches) = setup(3, 3);
    let all: Vec<Vec<usize>> = vec![(0..16).collect(); 3];
    let a = encode(&m, &p, &patches, &all);
    let mut t = Tape::new();
    let bound = p.bind(&mut t, false);
    let x = t.constant(patches.reshape(&[3 * 16, 12]).unwrap());
    let enc = m.encode_full(&mut t, &bound, x, 3).unwrap();
    assert!(a.bitwise_eq(t.value(enc.states)));
}

#[test]
fn without_decoder_positions_every_masked_slot_decodes_identically() {
    let (m, mut p, patches) = setup(4, 2);
    let shape = p.tensor("decoder.pos_embed").unwrap().shape().to_vec();
    p.insert("decoder.pos_embed", Tensor::zeros(&shape));
    let mut r = rng::named(5, "mask");
    let plans: Vec<_> = (0..2).map(|_| make_mask(16, 0.75, &mut r).unwrap()).collect();
    let visible: Vec<Vec<usize>> = plans.iter().map(|pl| pl.visible.clone()).collect();
    let mut t = Tape::new();
    let bound = p.bind(&mut t, false);
    let x = t.constant(select(&patches, &visible));
    let enc = m.encode(&mut t, &bound, x, &visible).unwrap();
    let out = m.decode(&mut t, &bound, &enc, &visible).unwrap();
    let out = t.value(out).clone();
    for (b, plan) in plans.iter().enumerate() {
        let first = row(&out, b * 16 + plan.masked[0]).to_vec();
        for &i in &plan.masked[1..] {
            for (x, y) in row(&out, b * 16 + i).iter().zip(&first) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn with_nothing_visible_only_the_class_token_is_encoded() {
    let (m, p, a) = setup(6, 1);
    let (_, _, b) = setup(7, 1);
    let states: Vec<Tensor> = [a, b]
        .iter()
        .map(|patches| {
            let mut t = Tape::new();
            let bound = p.bind(&mut t, false);
            // The patch input is ignored when no index is listed.
            let x = t.constant(patches.clone().reshape(&[16, 12]).unwrap());
            let enc = m.encode(&mut t, &bound, x, &[vec![]]).unwrap();
            assert_eq!(enc.tokens, 1);
            t.value(enc.states).clone()
        })
        .collect();
    assert_eq!(states[0].shape(), &[1, 8]);
    assert!(states[0].bitwise_eq(&states[1]));
}

#[test]
fn masks_have_exact_counts_and_uniform_index_frequencies() {
    let (n, r, draws) = (16usize, 0.75, 10_000usize);
    let mut g = rng::named(8, "mask-stats");
    let mut hits = vec![0usize; n];
    for _ in 0..draws {
        let plan = make_mask(n, r, &mut g).unwrap();
        assert_eq!(plan.masked.len(), (r * n as f64).round() as usize);
        assert_eq!(plan.masked.len() + plan.visible.len(), n);
        for &i in &plan.masked {
            hits[i] += 1;
        }
    }
    let sigma = (r * (1.0 - r) / draws as f64).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        let f = h as f64 / draws as f64;
        assert!((f - r).abs() <= 3.0 * sigma, "index {i}: {f}");
    }
    for (patches, ratio) in [(4, 0.5), (49, 0.75), (196, 0.75), (10, 0.33)] {
        assert_eq!(masked_count(patches, ratio), (ratio * patches as f64).round() as usize);
        let plan = make_mask(patches, ratio, &mut g).unwrap();
        assert_eq!(plan.masked.len(), masked_count(patches, ratio));
    }
    assert!(make_mask(16, 0.99, &mut g).is_err());
    assert!(make_mask(16, 0.0, &mut g).is_err());
}
