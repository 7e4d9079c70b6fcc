use bcsnet_core::decoder::*;
use bcsnet_core::encoder::EncoderConfig;
use bcsnet_core::model::{BcsNet, ModelConfig};
use bcsnet_core::nn::{Ctx, Mode};
use bcsnet_core::params::ParamStore;
use bcsnet_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Shape, r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| r.random_range(lo..hi))
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d} > {tol}");
}

#[test]
fn spatial_attention_hand_example() {
    let mut store = ParamStore::new();
    let sa = SpatialAttention::new(&mut store, "sa", &mut rng(0)).unwrap();
    zero_params(&mut store, "sa");
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let f = ctx.input(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let (fs, a) = sa.forward(&mut ctx, f).unwrap();
    assert_eq!(ctx.value(fs).data(), &[1.5, 3.0, 4.5, 6.0]);
    assert!(ctx.value(a).data().iter().all(|v| *v == 0.5));
}

#[test]
fn spatial_attention_bounds_and_zero() {
    let mut store = ParamStore::new();
    let sa = SpatialAttention::new(&mut store, "sa", &mut rng(1)).unwrap();
    let mut r = rng(2);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let zero = ctx.input(Tensor::zeros(Shape::new(2, 3, 5, 4)));
    let (z, _) = sa.forward(&mut ctx, zero).unwrap();
    assert!(ctx.value(z).data().iter().all(|v| *v == 0.0));
    let f = random_tensor(Shape::new(2, 3, 5, 4), &mut r, 0.0, 3.0);
    let fv = ctx.input(f.clone());
    let (fs, _) = sa.forward(&mut ctx, fv).unwrap();
    for (x, y) in f.data().iter().zip(ctx.value(fs).data()) {
        assert!(*x <= *y && *y <= 2.0 * x);
    }
}

#[test]
fn boundary_enhance_cases() {
    let store = ParamStore::new();
    let mut r = rng(3);
    let f = random_tensor(Shape::new(1, 4, 6, 6), &mut r, -2.0, 2.0);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let fv = ctx.input(f.clone());
    let zero = ctx.input(Tensor::zeros(Shape::new(1, 1, 6, 6)));
    let one = ctx.input(Tensor::full(Shape::new(1, 1, 6, 6), 1.0));
    let a = boundary_enhance(&mut ctx, fv, zero).unwrap();
    let b = boundary_enhance(&mut ctx, fv, one).unwrap();
    assert_eq!(ctx.value(a), &f);
    assert_eq!(ctx.value(b), &f.map(|v| 2.0 * v));

    let mut sb = Tensor::zeros(Shape::new(1, 1, 2, 2));
    sb.set(0, 0, 1, 0, 0.25);
    let fs = ctx.input(Tensor::full(Shape::new(1, 1, 2, 2), 4.0));
    let sbv = ctx.input(sb);
    let out = boundary_enhance(&mut ctx, fs, sbv).unwrap();
    assert_eq!(ctx.value(out).data(), &[4.0, 4.0, 5.0, 4.0]);
}

#[test]
fn zero_gain_context_is_identity() {
    let mut r = rng(4);
    for _ in 0..10 {
        let f = random_tensor(Shape::new(2, 5, 7, 3), &mut r, -3.0, 3.0);
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let fv = ctx.input(f.clone());
        let gain = ctx.input(Tensor::scalar(0.0));
        let out = global_context(&mut ctx, fv, gain).unwrap();
        assert_close(ctx.value(out), &f, 1e-12);
        let (reference, _) = global_context_reference(&f.select(0), 0.0).unwrap();
        assert_close(&reference, &f.select(0), 1e-12);
    }
}

#[test]
fn single_position_context_example() {
    let f = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
    let (out, map) = global_context_reference(&f, 0.5).unwrap();
    assert_eq!(map.omega, vec![1.0]);
    assert_eq!(map.g.data(), &[1.0]);
    assert_eq!(out.data(), &[3.0]);
    let store = ParamStore::new();
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let fv = ctx.input(f);
    let gain = ctx.input(Tensor::scalar(0.5));
    let o = global_context(&mut ctx, fv, gain).unwrap();
    assert!((ctx.value(o).item() - 3.0).abs() < 1e-15);
}

#[test]
fn omega_rows_are_stochastic() {
    let mut r = rng(5);
    for _ in 0..100 {
        let c = r.random_range(1..6);
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let f = random_tensor(Shape::new(1, c, h, w), &mut r, -4.0, 4.0);
        let (_, map) = global_context_reference(&f, 1.0).unwrap();
        for row in map.omega.chunks(map.positions) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn streamed_context_matches_dense_reference() {
    let mut r = rng(6);
    // 13x13 = 169 positions crosses the streaming block size
    for (c, h, w) in [(3, 4, 5), (6, 13, 13), (1, 1, 9)] {
        let f = random_tensor(Shape::new(2, c, h, w), &mut r, -2.0, 2.0);
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let fv = ctx.input(f.clone());
        let gain = ctx.input(Tensor::scalar(0.7));
        let out = global_context(&mut ctx, fv, gain).unwrap();
        for n in 0..2 {
            let (want, _) = global_context_reference(&f.select(n), 0.7).unwrap();
            assert_close(&ctx.value(out).select(n), &want, 1e-10);
        }
    }
}

#[test]
fn context_is_permutation_equivariant() {
    let mut r = rng(7);
    let (c, h, w) = (4, 3, 5);
    let p = h * w;
    let f = random_tensor(Shape::new(1, c, h, w), &mut r, -2.0, 2.0);
    let mut perm: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let permute = |t: &Tensor| {
        Tensor::from_fn(t.shape(), |_, k, y, x| {
            let j = perm[y * w + x];
            t.at(0, k, j / w, j % w)
        })
    };
    let (out, _) = global_context_reference(&f, 0.9).unwrap();
    let (out_p, _) = global_context_reference(&permute(&f), 0.9).unwrap();
    assert_close(&out_p, &permute(&out), 1e-12);
}

#[test]
fn aggc_chain_reduces_to_one_and_a_half() {
    let mut store = ParamStore::new();
    let aggc = Aggc::new(&mut store, "a", &mut rng(8)).unwrap();
    zero_params(&mut store, "a.attention");
    let f = random_tensor(Shape::new(2, 3, 4, 4), &mut rng(9), -1.0, 1.0);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let fv = ctx.input(f.clone());
    let sb = ctx.input(Tensor::zeros(Shape::new(2, 1, 8, 8)));
    let out = aggc.forward(&mut ctx, fv, sb).unwrap();
    assert_close(ctx.value(out.features), &f.map(|v| 1.5 * v), 1e-12);

    // zero input stays zero through all three stages
    let z = ctx.input(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let sb1 = ctx.input(Tensor::full(Shape::new(1, 1, 4, 4), 0.3));
    let o = aggc.forward(&mut ctx, z, sb1).unwrap();
    assert!(ctx.value(o.features).data().iter().all(|v| *v == 0.0));
}

fn block_setup() -> (ParamStore, BcsrBlock) {
    let mut store = ParamStore::new();
    let block = BcsrBlock::new(&mut store, 3, 6, 5, 7, &mut rng(10)).unwrap();
    (store, block)
}

#[test]
fn zero_guidance_leaves_concat_untouched() {
    let (store, block) = block_setup();
    let mut r = rng(11);
    let prev = random_tensor(Shape::new(1, 6, 4, 4), &mut r, -1.0, 1.0);
    let fi = random_tensor(Shape::new(1, 5, 8, 8), &mut r, -1.0, 1.0);
    let sb = random_tensor(Shape::new(1, 1, 32, 32), &mut r, 0.0, 1.0);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let (pv, fv, sbv) = (ctx.input(prev), ctx.input(fi), ctx.input(sb));
    let ss = ctx.input(Tensor::zeros(Shape::new(1, 1, 8, 8)));
    let out = block.forward(&mut ctx, pv, fv, sbv, ss, Ablation::default(), (64, 64)).unwrap();
    let up = ctx.graph.resize(pv, 8, 8);
    let a = block.aggc.forward(&mut ctx, fv, sbv).unwrap();
    let cat = ctx.graph.concat(up, a.features).unwrap();
    assert_eq!(ctx.value(out.gated), ctx.value(cat));
    assert_eq!(ctx.value(out.side).shape(), Shape::new(1, 1, 64, 64));
    assert_eq!(ctx.value(out.features).shape(), Shape::new(1, 7, 8, 8));
}

#[test]
fn zero_side_kernel_gives_half() {
    let (mut store, block) = block_setup();
    zero_params(&mut store, "decoder.bcsr3.side");
    let mut r = rng(12);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let pv = ctx.input(random_tensor(Shape::new(1, 6, 8, 8), &mut r, -1.0, 1.0));
    let fv = ctx.input(random_tensor(Shape::new(1, 5, 8, 8), &mut r, -1.0, 1.0));
    let sbv = ctx.input(random_tensor(Shape::new(1, 1, 32, 32), &mut r, 0.0, 1.0));
    let ssv = ctx.input(random_tensor(Shape::new(1, 1, 8, 8), &mut r, 0.0, 1.0));
    let out = block.forward(&mut ctx, pv, fv, sbv, ssv, Ablation::default(), (32, 32)).unwrap();
    assert!(ctx.value(out.side).data().iter().all(|v| *v == 0.5));
}

#[test]
fn disabled_aggc_passes_encoder_features_through() {
    let (store, block) = block_setup();
    let mut r = rng(13);
    let prev = random_tensor(Shape::new(1, 6, 8, 8), &mut r, -1.0, 1.0);
    let fi = random_tensor(Shape::new(1, 5, 8, 8), &mut r, -1.0, 1.0);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let (pv, fv) = (ctx.input(prev), ctx.input(fi));
    let sbv = ctx.input(Tensor::full(Shape::new(1, 1, 32, 32), 0.5));
    let ssv = ctx.input(Tensor::full(Shape::new(1, 1, 8, 8), 0.25));
    let ab = Ablation {
        disable_aggc: true,
        disable_sg: true,
    };
    let out = block.forward(&mut ctx, pv, fv, sbv, ssv, ab, (32, 32)).unwrap();
    assert!(out.spatial_attention.is_none());
    let cat = ctx.graph.concat(pv, fv).unwrap();
    assert_eq!(ctx.value(out.gated), ctx.value(cat));
}

#[test]
fn zeroed_heads_give_uniform_half_maps() {
    let mut store = ParamStore::new();
    let enc = EncoderConfig::default();
    let ba = BoundaryAttention::new(&mut store, 16, 8, &mut rng(14)).unwrap();
    let sg = SemanticGuidance::new(&mut store, enc.channels, &mut rng(15)).unwrap();
    zero_params(&mut store, "decoder.ba.");
    zero_params(&mut store, "decoder.sg.fuse");
    let mut r = rng(16);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let f1 = ctx.input(random_tensor(Shape::new(1, 16, 32, 32), &mut r, -1.0, 1.0));
    let f2 = ctx.input(random_tensor(Shape::new(1, 32, 16, 16), &mut r, -1.0, 1.0));
    let f3 = ctx.input(random_tensor(Shape::new(1, 64, 8, 8), &mut r, -1.0, 1.0));
    let f4 = ctx.input(random_tensor(Shape::new(1, 128, 4, 4), &mut r, -1.0, 1.0));
    let b = ba.forward(&mut ctx, f1, (64, 64)).unwrap();
    let s = sg.forward(&mut ctx, f2, f3, f4, (64, 64)).unwrap();
    assert_eq!(ctx.value(b.full).shape(), Shape::new(1, 1, 64, 64));
    assert_eq!(ctx.value(s.native).shape(), Shape::new(1, 1, 8, 8));
    for v in [b.full, b.native, s.full, s.native] {
        assert!(ctx.value(v).data().iter().all(|x| *x == 0.5));
    }
}

fn decode(cfg: ModelConfig, size: usize, seed: u64) -> bcsnet_core::model::DecoderOutputs {
    let (net, store) = BcsNet::new(cfg, seed).unwrap();
    let img = random_tensor(Shape::new(1, 3, size, size), &mut rng(seed + 100), 0.0, 1.0);
    net.infer(&store, &img).unwrap()
}

#[test]
fn five_maps_at_input_resolution() {
    for size in [64, 352] {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_size: (size, size),
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        };
        let out = decode(cfg, size, 1);
        for m in out.all() {
            assert_eq!(m.shape(), Shape::new(1, 1, size, size));
            assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn ablated_models_still_emit_five_maps() {
    for (a, s) in [(true, false), (false, true), (true, true)] {
        let cfg = ModelConfig {
            ablation: Ablation {
                disable_aggc: a,
                disable_sg: s,
            },
            ..ModelConfig::default()
        };
        let out = decode(cfg, 64, 2);
        assert_eq!(out.attention2.is_some(), !a);
        for m in out.all() {
            assert_eq!(m.shape(), Shape::new(1, 1, 64, 64));
            assert!(m.all_finite());
        }
    }
}

#[test]
fn decode_is_bitwise_deterministic() {
    assert_eq!(decode(ModelConfig::default(), 64, 3), decode(ModelConfig::default(), 64, 3));
}
