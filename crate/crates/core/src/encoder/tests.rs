use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{check_gradients, Array, Tape};
use crate::patch_ops::{patchify, shuffle, ImageBatch, PatchBatch, Permutation};

fn images(n: usize, side: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * side * side).map(|_| rng.gen::<f64>()).collect();
    ImageBatch::new(n, 3, side, side, data).unwrap()
}

fn patches(n: usize, seed: u64) -> PatchBatch {
    patchify(&images(n, 8, seed), 2).unwrap()
}

fn micro(seed: u64) -> EncoderParams {
    EncoderParams::init(&ViTConfig::micro(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn micro_backbone_shape() {
    let enc = micro(0);
    let rep = represent(&enc.params, &enc.cfg, &patches(5, 1)).unwrap();
    assert_eq!(rep.shape(), &[5, 32]);
    assert!(rep.all_finite());
}

#[test]
fn depth_zero_ignores_content() {
    let cfg = ViTConfig {
        depth: 0,
        ..ViTConfig::micro()
    };
    assert!(cfg.validate().is_err());
    let enc = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let a = represent(&enc.params, &cfg, &patches(2, 10)).unwrap();
    let b = represent(&enc.params, &cfg, &patches(2, 11)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.row(0), a.row(1));
}

#[test]
fn batch_equivariance() {
    let enc = micro(1);
    let imgs = images(4, 8, 2);
    let swapped = imgs.select(&[1, 0, 2, 3]);
    let a = represent(&enc.params, &enc.cfg, &patchify(&imgs, 2).unwrap()).unwrap();
    let b = represent(&enc.params, &enc.cfg, &patchify(&swapped, 2).unwrap()).unwrap();
    for (i, j) in [(0, 1), (1, 0), (2, 2), (3, 3)] {
        for (x, y) in a.row(i).iter().zip(b.row(j)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn token_order_invariant_without_positions() {
    let mut enc = micro(2);
    let pos = enc.params.get_mut("pos_embed").unwrap();
    pos.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let pb = patches(3, 4);
    let perm = Permutation::sample(pb.tokens(), &mut ChaCha8Rng::seed_from_u64(5));
    let shuffled = shuffle(&pb, &perm).unwrap();
    let a = represent(&enc.params, &enc.cfg, &pb).unwrap();
    let b = represent(&enc.params, &enc.cfg, &shuffled).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-10, "{}", a.max_abs_diff(&b));
}

#[test]
fn token_count_mismatch_rejected() {
    let enc = micro(0);
    let pb = patchify(&images(2, 4, 0), 2).unwrap();
    assert!(matches!(
        represent(&enc.params, &enc.cfg, &pb),
        Err(crate::Error::Shape { .. })
    ));
}

#[test]
fn head_widths_and_zero_input() {
    let enc = micro(3);
    let mut tape = Tape::new();
    let p = bind(&mut tape, &enc.params, false);
    let rep = tape.constant(Array::zeros(&[4, 32]));
    let mut stats = HeadStats::new();
    let (z, h) = forward_heads(&mut tape, &p, &enc.buffers, rep, BnMode::Eval, &mut stats).unwrap();
    assert!(stats.is_empty());
    assert_eq!(tape.shape(z), &[4, 256]);
    assert_eq!(tape.shape(h), &[4, 256]);
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradients_reach_both_heads_and_backbone() {
    let enc = micro(4);
    let mut tape = Tape::new();
    let p = bind(&mut tape, &enc.params, true);
    let rep = forward_backbone(&mut tape, &p, &enc.cfg, &patches(6, 7)).unwrap();
    let mut stats = HeadStats::new();
    let (_, h) = forward_heads(&mut tape, &p, &enc.buffers, rep, BnMode::Train, &mut stats).unwrap();
    assert_eq!(stats.len(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = tape.constant(Array::from_fn(&[6, 256], |_| rng.gen::<f64>() - 0.5));
    let prod = tape.mul(h, c).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss);
    for name in ["proj.0.weight", "proj.2.weight", "pred.0.weight", "pred.1.weight", "patch_embed.weight"] {
        let g = grads.wrt(p.get(name).unwrap());
        assert!(g.data().iter().any(|v| v.abs() > 1e-12), "{name} has no gradient");
    }
}

#[test]
fn running_stats_follow_momentum() {
    let mut enc = micro(5);
    let mut tape = Tape::new();
    let p = bind(&mut tape, &enc.params, false);
    let rep = forward_backbone(&mut tape, &p, &enc.cfg, &patches(4, 9)).unwrap();
    let mut stats = HeadStats::new();
    forward_heads(&mut tape, &p, &enc.buffers, rep, BnMode::Train, &mut stats).unwrap();
    update_running_stats(&mut enc.buffers, &stats, 4);
    let (name, s) = &stats[0];
    let rm = enc.buffers.get(&format!("{name}.running_mean")).unwrap();
    let rv = enc.buffers.get(&format!("{name}.running_var")).unwrap();
    for i in 0..rm.len() {
        assert!((rm.data()[i] - 0.1 * s.mean[i]).abs() < 1e-15);
        assert!((rv.data()[i] - (0.9 + 0.1 * s.var[i] * 4.0 / 3.0)).abs() < 1e-15);
    }
}

#[test]
fn backbone_gradient_matches_finite_differences() {
    let cfg = ViTConfig {
        patch_side: 2,
        depth: 1,
        heads: 2,
        dim: 8,
        mlp_ratio: 2,
        image_side: 4,
        channels: 3,
        head_hidden: 8,
        head_out: 8,
    };
    let enc = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let pb = patchify(&images(2, 4, 12), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let weights = Array::from_fn(&[2, 8], |_| rng.gen::<f64>() - 0.5);
    let start = enc.params.get("blocks.0.attn.qkv.weight").unwrap().map(|v| v * 20.0);
    let check = check_gradients(
        |tape, x| {
            let mut p = bind(tape, &enc.params, false);
            p.insert("blocks.0.attn.qkv.weight", x);
            let rep = forward_backbone(tape, &p, &cfg, &pb)?;
            let w = tape.constant(weights.clone());
            let prod = tape.mul(rep, w)?;
            Ok(tape.sum(prod))
        },
        &start,
        1e-5,
    )
    .unwrap();
    assert!(check.passes(1e-4), "{check:?}");
}

#[test]
fn momentum_copy_omits_prediction_head() {
    let enc = micro(0);
    let xi = enc.momentum_copy();
    assert!(xi.params.names().all(|n| !n.starts_with(PREDICTION_PREFIX)));
    assert!(xi.params.names().any(|n| n.starts_with("proj.")));
    assert_eq!(xi.params.len() + 6, enc.params.len());
    assert_eq!(xi.buffers.len(), 6);
}

#[test]
fn ema_fixpoint_copy_and_bounds() {
    let enc = micro(0);
    let other = micro(1);
    let mut xi = other.momentum_copy();
    let before = xi.clone();
    for _ in 0..5 {
        ema_update(&enc, &mut xi, 1.0).unwrap();
    }
    assert_eq!(xi, before);
    ema_update(&enc, &mut xi, 0.0).unwrap();
    assert_eq!(xi, enc.momentum_copy());
    assert!(ema_update(&enc, &mut xi, 1.5).is_err());
    assert!(ema_update(&enc, &mut xi, -0.1).is_err());
    let mut short = xi.clone();
    short.params = short.params.filter(|n| n != "cls_token");
    assert!(ema_update(&enc, &mut short, 0.5).is_err());
}

#[test]
fn ema_geometric_closed_form() {
    let theta = micro(0);
    let mut xi = micro(1).momentum_copy();
    let xi0 = xi.clone();
    let mu: f64 = 0.99;
    for _ in 0..100 {
        ema_update(&theta, &mut xi, mu).unwrap();
    }
    let a = mu.powi(100);
    let target = theta.momentum_copy();
    let mut worst: f64 = 0.0;
    for (((_, x), (_, x0)), (_, t)) in xi.params.iter().zip(xi0.params.iter()).zip(target.params.iter()) {
        for ((v, v0), tv) in x.data().iter().zip(x0.data()).zip(t.data()) {
            worst = worst.max((v - (a * v0 + (1.0 - a) * tv)).abs());
        }
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn checkpoint_round_trip() {
    let enc = micro(7);
    let mut ck = Checkpoint::new(enc.cfg.clone(), BlobDtype::F64);
    ck.put_set("theta", &enc.params);
    ck.put_set("buffers", &enc.buffers);
    ck.set_meta("step", 17);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.take_set("theta"), enc.params);
    assert_eq!(back.meta("step"), Some("17"));

    let mut ck32 = ck.clone();
    ck32.dtype = BlobDtype::F32;
    let back32 = Checkpoint::from_bytes(&ck32.to_bytes(), &path).unwrap();
    let w = back32.take_set("theta");
    for ((_, a), (_, b)) in w.iter().zip(enc.params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let enc = micro(7);
    let mut ck = Checkpoint::new(enc.cfg.clone(), BlobDtype::F64);
    ck.put_set("theta", &enc.params);
    let bytes = ck.to_bytes();
    let p = std::path::Path::new("x.ckpt");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = Checkpoint::from_bytes(&bad, p).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra, p).is_err());
}

#[test]
fn decay_exemptions() {
    for n in ["cls_token", "blocks.0.norm1.weight", "norm.weight", "proj.0.bn.weight", "proj.0.bias"] {
        assert!(is_decay_exempt(n), "{n}");
    }
    for n in ["patch_embed.weight", "pos_embed", "blocks.1.attn.qkv.weight", "pred.1.weight"] {
        assert!(!is_decay_exempt(n), "{n}");
    }
}
