use feedkit_core::losses::cross_entropy;
use feedkit_core::nn::{
    build_ntl, build_paraphraser, build_resnet, build_translator, resnet_param_count,
};
use feedkit_core::{
    Arch, Graph64, Mode, Network, Network32, Network64, NtlStyle, Sgd, Tensor32, Tensor64,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn resnet_parameter_counts_hit_anchors() {
    let r56 = build_resnet::<f32>(56, 100, 0).unwrap().count_params();
    let r110 = build_resnet::<f32>(110, 100, 0).unwrap().count_params();
    assert!((833_000..=867_000).contains(&r56), "resnet56: {r56}");
    assert!((1_695_000..=1_765_000).contains(&r110), "resnet110: {r110}");
    assert_eq!(r56, resnet_param_count(56, 100).unwrap());
    assert_eq!(r110, resnet_param_count(110, 100).unwrap());
    // 0.27M is the usual figure for the 20-layer net on 10 classes
    let r20 = resnet_param_count(20, 10).unwrap();
    assert!((265_000..=275_000).contains(&r20), "resnet20: {r20}");
}

#[test]
fn bad_depths_are_rejected() {
    for d in [0, 7, 21, 4] {
        assert!(build_resnet::<f32>(d, 10, 0).is_err(), "depth {d}");
    }
    assert!(build_resnet::<f32>(20, 0, 0).is_err());
}

#[test]
fn arch_strings_round_trip() {
    for s in [
        "resnet20-c10",
        "resnet110-c100",
        "ntl64",
        "ntl16-plain",
        "encoder64-z32",
        "decoder32-c64",
        "translator64-z32",
        "linear4-o2",
    ] {
        let a: Arch = s.parse().unwrap();
        assert_eq!(a.to_string(), s);
    }
    assert!("resnet-c10".parse::<Arch>().is_err());
}

#[test]
fn resnet_taps_have_stage_shapes() {
    let mut r = rng(1);
    let net = build_resnet::<f32>(8, 7, 3).unwrap();
    for size in [8usize, 32] {
        let x = Tensor32::randn(&[2, 3, size, size], 1.0, &mut r);
        let out = net.infer(&x).unwrap();
        assert_eq!(out.output.shape(), &[2, 7]);
        assert_eq!(out.tap("group1").unwrap().shape(), &[2, 16, size, size]);
        assert_eq!(
            out.tap("group2").unwrap().shape(),
            &[2, 32, size / 2, size / 2]
        );
        assert_eq!(
            out.tap("group3").unwrap().shape(),
            &[2, 64, size / 4, size / 4]
        );
        assert_eq!(out.final_tap().unwrap(), out.tap("group3").unwrap());
    }
}

#[test]
fn eval_forward_is_deterministic_and_pure() {
    let mut r = rng(2);
    let mut net = build_resnet::<f32>(8, 10, 0).unwrap();
    let x = Tensor32::randn(&[3, 3, 8, 8], 1.0, &mut r);
    let a = net.infer(&x).unwrap();
    let b = net.infer(&x).unwrap();
    assert_eq!(a, b);
    let mut g = feedkit_core::Graph32::no_grad();
    let xv = g.constant(x.clone());
    let _ = net.forward(&mut g, xv, Mode::Eval).unwrap();
    assert_eq!(net.infer(&x).unwrap(), a);
}

#[test]
fn eval_forward_is_permutation_equivariant() {
    let mut r = rng(3);
    let net = build_resnet::<f64>(8, 5, 0).unwrap();
    let x = Tensor64::randn(&[4, 3, 8, 8], 1.0, &mut r);
    let perm = [2, 0, 3, 1];
    let xp = x.select_rows(&perm).unwrap();
    let a = net.infer(&x).unwrap().output;
    let b = net.infer(&xp).unwrap().output;
    for (i, &p) in perm.iter().enumerate() {
        for k in 0..5 {
            let (u, v) = (b.data()[i * 5 + k], a.data()[p * 5 + k]);
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }
}

#[test]
fn same_seed_same_weights() {
    let a = build_resnet::<f32>(14, 10, 42).unwrap();
    let b = build_resnet::<f32>(14, 10, 42).unwrap();
    let c = build_resnet::<f32>(14, 10, 43).unwrap();
    let data = |n: &Network32| {
        n.state()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(data(&a), data(&b));
    assert_ne!(data(&a), data(&c));
}

#[test]
fn ntl_preserves_shape_on_a_grid() {
    let mut r = rng(4);
    for c in [1, 3, 16, 64] {
        for hw in [1, 2, 5, 8] {
            for style in [NtlStyle::Plain, NtlStyle::BnRelu] {
                let ntl = build_ntl::<f32>(c, style, 0).unwrap();
                let x = Tensor32::randn(&[2, c, hw, hw], 1.0, &mut r);
                let y = ntl.infer(&x).unwrap().output;
                assert_eq!(y.shape(), x.shape(), "c {c} hw {hw} {style}");
                assert!(y.all_finite());
            }
        }
    }
    let p = build_ntl::<f32>(8, NtlStyle::Plain, 0)
        .unwrap()
        .count_params();
    assert_eq!(p, 3 * (8 * 8 * 9 + 8));
    let q = build_ntl::<f32>(8, NtlStyle::BnRelu, 0)
        .unwrap()
        .count_params();
    assert_eq!(q, p + 2 * 2 * 8);
    assert!(build_ntl::<f32>(0, NtlStyle::Plain, 0).is_err());
}

#[test]
fn paraphraser_and_translator_shapes() {
    let mut r = rng(5);
    let mut p = build_paraphraser::<f32>(64, 0.5, 1).unwrap();
    assert_eq!(p.factor_channels(), 32);
    let x = Tensor32::randn(&[2, 64, 2, 2], 1.0, &mut r);
    let mut g = feedkit_core::Graph32::no_grad();
    let xv = g.constant(x);
    let (z, recon) = p.forward(&mut g, xv, Mode::Eval).unwrap();
    assert_eq!(g.shape(z), &[2, 32, 2, 2]);
    assert_eq!(g.shape(recon), &[2, 64, 2, 2]);
    let t = build_translator::<f32>(16, 32, 1).unwrap();
    let y = t
        .infer(&Tensor32::randn(&[1, 16, 3, 3], 1.0, &mut r))
        .unwrap()
        .output;
    assert_eq!(y.shape(), &[1, 32, 3, 3]);
    assert!(build_paraphraser::<f32>(64, 0.0, 1).is_err());
    assert!(build_paraphraser::<f32>(64, 1.5, 1).is_err());
}

#[test]
fn resnet_parameter_gradients_match_finite_differences() {
    // Spot-check a handful of coordinates per tensor on the smallest net.
    let mut r = rng(6);
    let mut net: Network64 = build_resnet(8, 3, 9).unwrap();
    let x = Tensor64::randn(&[4, 3, 4, 4], 1.0, &mut r);
    let labels = [0, 2, 1, 2];
    let loss = |net: &mut Network64, grad: bool| -> f64 {
        let mut g = if grad {
            Graph64::new()
        } else {
            Graph64::no_grad()
        };
        let xv = g.constant(x.clone());
        let out = net.forward(&mut g, xv, Mode::Train).unwrap();
        let l = cross_entropy(&mut g, out.logits(), &labels).unwrap();
        if grad {
            g.backward(l).unwrap();
            net.collect_grads(&g).unwrap();
        }
        g.item(l).unwrap()
    };
    let base = net.clone();
    loss(&mut net, true);
    let h = 1e-6;
    let names: Vec<String> = net.params().keys().cloned().collect();
    for name in names {
        let grad = net.params()[&name].grad().unwrap().to_vec();
        let n = grad.len();
        for i in [0, n / 3, n / 2, n - 1] {
            let mut up = base.clone();
            up.state_mut(&name).unwrap().data_mut()[i] += h;
            let mut down = base.clone();
            down.state_mut(&name).unwrap().data_mut()[i] -= h;
            let num = (loss(&mut up, false) - loss(&mut down, false)) / (2.0 * h);
            let err = (grad[i] - num).abs() / 1f64.max(grad[i].abs()).max(num.abs());
            assert!(err < 1e-5, "{name}[{i}]: {} vs {num}", grad[i]);
        }
    }
}

#[test]
fn frozen_network_gets_no_gradients() {
    let mut r = rng(7);
    let mut net = build_resnet::<f32>(8, 4, 0).unwrap();
    net.set_frozen(true);
    let mut g = feedkit_core::Graph32::new();
    let xv = g.leaf(Tensor32::randn(&[2, 3, 4, 4], 1.0, &mut r).with_requires_grad());
    let out = net.forward(&mut g, xv, Mode::Eval).unwrap();
    let l = cross_entropy(&mut g, out.logits(), &[0, 1]).unwrap();
    g.backward(l).unwrap();
    net.collect_grads(&g).unwrap();
    assert!(net.params().values().all(|p| p.grad().is_none()));
    assert!(g.grad(xv).is_some());
}

#[test]
fn train_mode_updates_running_stats_and_eval_does_not() {
    let mut r = rng(8);
    let mut net = build_resnet::<f32>(8, 4, 0).unwrap();
    let x = Tensor32::randn(&[4, 3, 4, 4], 1.0, &mut r).map(|v| v + 3.0);
    let before = net.buffers()["bn1.running_mean"].data().to_vec();
    let mut g = feedkit_core::Graph32::no_grad();
    let xv = g.constant(x);
    net.forward(&mut g, xv, Mode::Eval).unwrap();
    assert_eq!(net.buffers()["bn1.running_mean"].data(), &before[..]);
    net.forward(&mut g, xv, Mode::Train).unwrap();
    assert_ne!(net.buffers()["bn1.running_mean"].data(), &before[..]);
}

#[test]
fn sgd_matches_hand_rolled_update() {
    let mut net = Network::<f64>::build(
        &Arch::Linear {
            inputs: 3,
            outputs: 2,
        },
        1,
    )
    .unwrap();
    let w0: Vec<f64> = net.params()["fc.weight"].data().to_vec();
    let grads = [vec![0.5; 6], vec![-1.0; 6]];
    let (lr, mom, wd) = (0.1, 0.9, 0.01);
    let mut opt = Sgd::new(lr, mom, wd).unwrap();
    let mut w = w0.clone();
    let mut v = vec![0.0; 6];
    for gr in &grads {
        for (name, p) in net.params_mut() {
            let g = if name == "fc.weight" {
                gr.clone()
            } else {
                vec![0.0; p.numel()]
            };
            p.accumulate_grad(&g).unwrap();
        }
        opt.step("lin", &mut net);
        for i in 0..6 {
            v[i] = mom * v[i] + gr[i] + wd * w[i];
            w[i] -= lr * v[i];
        }
    }
    for (a, b) in net.params()["fc.weight"].data().iter().zip(&w) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(Sgd::new(-0.1, 0.0, 0.0).is_err());
}
